"""Rendering-parameter vocabulary and its token, JSON and CSS encodings.

Thirteen browser-computed CSS properties describe one element. Every value is
a token in a single 1993-entry vocabulary::

    0-1920     integer pixels (layout, font-size, numeric line-height)
    1921-1966  palette colours (46 entries, see data/palette.json)
    1967-1969  font-style      normal, italic, oblique
    1970-1978  font-weight     100, 200, ..., 900
    1979       line-height     normal
    1980-1985  text-align      start, center, end, left, right, justify
    1986-1987  text-decoration none, underline
    1988-1991  text-transform  none, uppercase, lowercase, capitalize
    1992       PAD

A page is a ``dict`` mapping the 1-based pre-order element id to a length-13
``int64`` vector in ``RP_NAMES`` order.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from importlib import resources
from typing import NamedTuple

import numpy as np

RP_NAMES = (
    "left", "top", "width", "height",
    "font-style", "font-weight", "font-size", "line-height",
    "text-align", "text-decoration", "text-transform",
    "color", "background-color",
)
LAYOUT_PARAMS = RP_NAMES[:4]
TEXT_PARAMS = RP_NAMES[4:11]
COLOR_PARAMS = RP_NAMES[11:]
STYLE_PARAMS = TEXT_PARAMS + COLOR_PARAMS
RP_INDEX = {name: i for i, name in enumerate(RP_NAMES)}
LAYOUT_SLOTS = np.arange(0, 4)
STYLE_SLOTS = np.arange(4, 13)

W = len(RP_NAMES)
VOCAB_SIZE = 1993
PAD = 1992
MAX_PIXEL = 1920

# category -> (first, last) inclusive
CATEGORY_RANGES = {
    "pixel": (0, 1920),
    "color": (1921, 1966),
    "font-style": (1967, 1969),
    "font-weight": (1970, 1978),
    "line-height": (1979, 1979),
    "text-align": (1980, 1985),
    "text-decoration": (1986, 1987),
    "text-transform": (1988, 1991),
    "pad": (1992, 1992),
}

FONT_STYLES = ("normal", "italic", "oblique")
FONT_WEIGHTS = (100, 200, 300, 400, 500, 600, 700, 800, 900)
TEXT_ALIGNS = ("start", "center", "end", "left", "right", "justify")
TEXT_DECORATIONS = ("none", "underline")
TEXT_TRANSFORMS = ("none", "uppercase", "lowercase", "capitalize")

_KEYWORDS = {
    "font-style": (1967, FONT_STYLES),
    "text-align": (1980, TEXT_ALIGNS),
    "text-decoration": (1986, TEXT_DECORATIONS),
    "text-transform": (1988, TEXT_TRANSFORMS),
}
_PIXEL_CAP = {"left": 1920, "top": 1920, "width": 1920, "height": 1920,
              "font-size": 32, "line-height": 50}


class CodecError(ValueError):
    pass


class OutOfRange(CodecError):
    pass


class WrongKind(CodecError):
    pass


class IllegalToken(CodecError):
    pass


class InvalidVector(CodecError):
    pass


class UnknownParameter(CodecError):
    pass


class UnparseableValue(CodecError):
    pass


class ParseError(CodecError):
    def __init__(self, path, msg):
        super().__init__(f"{path}: {msg}")
        self.path = path


# ---- values ----------------------------------------------------------------

@dataclass(frozen=True)
class Px:
    value: int


@dataclass(frozen=True)
class Color:
    index: int


@dataclass(frozen=True)
class Weight:
    value: int


@dataclass(frozen=True)
class Keyword:
    name: str


class _Pad:
    _inst = None

    def __new__(cls):
        if cls._inst is None:
            cls._inst = super().__new__(cls)
        return cls._inst

    def __repr__(self):
        return "PAD_VALUE"


PAD_VALUE = _Pad()


class Violation(NamedTuple):
    param: str
    token: int
    message: str


def _default_palette():
    raw = resources.files("rpkit.data").joinpath("palette.json").read_text()
    return tuple(tuple(c) for c in json.loads(raw)["colors"])


@dataclass(frozen=True)
class Vocabulary:
    """Immutable vocabulary tables.

    ``pad_params`` lists the parameters where PAD is a legal value (it marks a
    property that does not apply, e.g. text properties of an ``<img>``).
    """

    palette: tuple = field(default_factory=_default_palette)
    pad_params: frozenset = frozenset(STYLE_PARAMS)

    def __post_init__(self):
        if len(self.palette) != 46:
            raise ValueError(f"palette must have 46 colours, got {len(self.palette)}")
        if len(set(self.palette)) != 46:
            raise ValueError("palette colours must be distinct")
        unknown = set(self.pad_params) - set(RP_NAMES)
        if unknown:
            raise UnknownParameter(f"unknown parameters in pad policy: {sorted(unknown)}")
        legal = {}
        for p in RP_NAMES:
            toks = _value_tokens(p)
            if p in self.pad_params:
                toks = np.append(toks, PAD)
            legal[p] = toks
        object.__setattr__(self, "_legal", legal)
        masks = np.zeros((W, VOCAB_SIZE), dtype=bool)
        for k, p in enumerate(RP_NAMES):
            masks[k, legal[p]] = True
        masks.setflags(write=False)
        object.__setattr__(self, "_masks", masks)

    def legal_tokens(self, param):
        """Sorted legal token ids for ``param`` under this PAD policy."""
        return self._legal[param]

    @property
    def legal_mask(self):
        """(13, 1993) boolean table of legal tokens per slot."""
        return self._masks

    def rgba(self, index):
        return self.palette[index]


def _value_tokens(param):
    if param in _PIXEL_CAP:
        toks = np.arange(_PIXEL_CAP[param] + 1)
        if param == "line-height":
            toks = np.append(toks, 1979)
        return toks.astype(np.int64)
    if param in COLOR_PARAMS:
        return np.arange(1921, 1967, dtype=np.int64)
    if param == "font-weight":
        return np.arange(1970, 1979, dtype=np.int64)
    base, names = _KEYWORDS[param]
    return np.arange(base, base + len(names), dtype=np.int64)


DEFAULT_VOCAB = Vocabulary()


def _check_param(param):
    if param not in RP_INDEX:
        raise UnknownParameter(f"unknown rendering parameter {param!r}")


def encode_value(param, value, vocab=DEFAULT_VOCAB):
    """Token id of ``value`` for ``param``.

    Plain ints are accepted as shorthand for ``Px`` on pixel parameters and
    ``Weight`` on font-weight; plain strings as ``Keyword``.
    """
    _check_param(param)
    if value is PAD_VALUE:
        if param not in vocab.pad_params:
            raise WrongKind(f"PAD is not legal for {param}")
        return PAD
    if isinstance(value, (bool, np.bool_)):
        raise WrongKind(f"boolean is not a value for {param}")
    if isinstance(value, (int, np.integer)):
        value = Weight(int(value)) if param == "font-weight" else Px(int(value))
    elif isinstance(value, str):
        value = Keyword(value)

    if isinstance(value, Px):
        if param not in _PIXEL_CAP:
            raise WrongKind(f"{param} does not take pixel values")
        if not 0 <= value.value <= _PIXEL_CAP[param]:
            raise OutOfRange(f"{param}={value.value}px outside 0..{_PIXEL_CAP[param]}")
        return int(value.value)
    if isinstance(value, Color):
        if param not in COLOR_PARAMS:
            raise WrongKind(f"{param} does not take colours")
        if not 0 <= value.index < 46:
            raise OutOfRange(f"colour index {value.index} outside 0..45")
        return 1921 + int(value.index)
    if isinstance(value, Weight):
        if param != "font-weight":
            raise WrongKind(f"{param} does not take font weights")
        if value.value not in FONT_WEIGHTS:
            raise OutOfRange(f"font-weight {value.value} not in {FONT_WEIGHTS}")
        return 1970 + FONT_WEIGHTS.index(value.value)
    if isinstance(value, Keyword):
        if param == "line-height":
            if value.name != "normal":
                raise OutOfRange(f"line-height keyword {value.name!r}")
            return 1979
        if param not in _KEYWORDS:
            raise WrongKind(f"{param} does not take keywords")
        base, names = _KEYWORDS[param]
        if value.name not in names:
            raise OutOfRange(f"{param} keyword {value.name!r} not in {names}")
        return base + names.index(value.name)
    raise WrongKind(f"unsupported value {value!r} for {param}")


def decode_value(param, token, vocab=DEFAULT_VOCAB):
    _check_param(param)
    token = int(token)
    if not (0 <= token < VOCAB_SIZE and vocab.legal_mask[RP_INDEX[param], token]):
        raise IllegalToken(f"token {token} is not legal for {param}")
    if token == PAD:
        return PAD_VALUE
    if token <= MAX_PIXEL:
        return Px(token)
    if param in COLOR_PARAMS:
        return Color(token - 1921)
    if param == "font-weight":
        return Weight(FONT_WEIGHTS[token - 1970])
    if param == "line-height":
        return Keyword("normal")
    base, names = _KEYWORDS[param]
    return Keyword(names[token - base])


def validate_vector(v, vocab=DEFAULT_VOCAB):
    """List of violations; empty iff every slot holds a legal token."""
    v = np.asarray(v)
    if v.shape != (W,):
        return [Violation("*", -1, f"expected {W} tokens, got shape {v.shape}")]
    out = []
    for k, p in enumerate(RP_NAMES):
        t = int(v[k])
        if not (0 <= t < VOCAB_SIZE and vocab.legal_mask[k, t]):
            why = "PAD not allowed" if t == PAD else "outside legal range"
            out.append(Violation(p, t, f"{p}: token {t} {why}"))
    return out


def vector_from_values(values, vocab=DEFAULT_VOCAB):
    """Build a token vector from a ``{param: value}`` mapping (all 13 required)."""
    missing = [p for p in RP_NAMES if p not in values]
    if missing:
        raise InvalidVector(f"missing parameters {missing}")
    return np.array([encode_value(p, values[p], vocab) for p in RP_NAMES], dtype=np.int64)


# ---- string formatting -----------------------------------------------------

def _fmt_alpha(a):
    a = float(a)
    return str(int(a)) if a.is_integer() else repr(a)


def format_token(param, token, vocab=DEFAULT_VOCAB):
    """Browser-style computed-value string for a token."""
    val = decode_value(param, token, vocab)
    if val is PAD_VALUE:
        return "PAD"
    if isinstance(val, Px):
        return f"{val.value}px"
    if isinstance(val, Color):
        r, g, b, a = vocab.rgba(val.index)
        return f"rgba({r}, {g}, {b}, {_fmt_alpha(a)})"
    if isinstance(val, Weight):
        return str(val.value)
    return val.name


_PX_RE = re.compile(r"^\s*(-?\d+(?:\.\d+)?)\s*px\s*$")
_RGB_RE = re.compile(r"^\s*rgba?\(\s*([\d.]+)\s*,\s*([\d.]+)\s*,\s*([\d.]+)\s*(?:,\s*([\d.]+)\s*)?\)\s*$")


def nearest_color(rgba, vocab=DEFAULT_VOCAB):
    pal = np.asarray(vocab.palette, dtype=np.float64)
    q = np.asarray(rgba, dtype=np.float64).copy()
    q[3] *= 255.0
    pal = pal.copy()
    pal[:, 3] *= 255.0
    return int(np.argmin(((pal - q) ** 2).sum(axis=1)))


def parse_token(param, text, vocab=DEFAULT_VOCAB, strict=True):
    """Inverse of ``format_token``.

    With ``strict=False`` fractional pixels are rounded and colours snap to the
    nearest palette entry; otherwise both must match exactly.
    """
    _check_param(param)
    s = str(text).strip()
    if s == "PAD":
        return encode_value(param, PAD_VALUE, vocab)
    m = _PX_RE.match(s)
    if m:
        num = float(m.group(1))
        if strict and not num.is_integer():
            raise UnparseableValue(f"{param}: non-integer pixel value {s!r}")
        px = int(round(num))
        if not strict and param in _PIXEL_CAP:
            px = min(max(px, 0), _PIXEL_CAP[param])
        return encode_value(param, Px(px), vocab)
    m = _RGB_RE.match(s)
    if m:
        rgba = [float(m.group(i)) for i in (1, 2, 3)] + [float(m.group(4)) if m.group(4) else 1.0]
        key = tuple(int(c) if float(c).is_integer() else c for c in rgba)
        if key in vocab.palette:
            return encode_value(param, Color(vocab.palette.index(key)), vocab)
        if strict:
            raise UnparseableValue(f"{param}: colour {s!r} not in palette")
        return encode_value(param, Color(nearest_color(rgba, vocab)), vocab)
    if param == "font-weight":
        try:
            w = int(s)
        except ValueError:
            if s in ("normal", "bold"):
                w = 400 if s == "normal" else 700
            else:
                raise UnparseableValue(f"font-weight {s!r}") from None
        if not strict:
            w = min(FONT_WEIGHTS, key=lambda fw: abs(fw - w))
        return encode_value(param, Weight(w), vocab)
    if re.fullmatch(r"[a-z-]+", s):
        return encode_value(param, Keyword(s), vocab)
    raise UnparseableValue(f"{param}: cannot parse {s!r}")


# ---- JSON ------------------------------------------------------------------

def element_key(eid):
    return f"ele{int(eid)}"


def _key_id(key, path="$"):
    m = re.fullmatch(r"ele(\d+)", key)
    if not m:
        raise ParseError(path, f"bad element key {key!r}")
    return int(m.group(1))


def page_to_obj(page, vocab=DEFAULT_VOCAB):
    out = {}
    for eid in sorted(page):
        vec = np.asarray(page[eid])
        viol = validate_vector(vec, vocab)
        if viol:
            raise InvalidVector(f"{element_key(eid)}: {viol[0].message}")
        out[element_key(eid)] = {p: format_token(p, vec[k], vocab) for k, p in enumerate(RP_NAMES)}
    return out


def to_json(page, vocab=DEFAULT_VOCAB):
    """Serialise a page to RP-JSON. Keys in ascending id order; byte-stable."""
    return json.dumps(page_to_obj(page, vocab), indent=2) + "\n"


def page_from_obj(obj, vocab=DEFAULT_VOCAB, strict=True):
    if not isinstance(obj, dict):
        raise ParseError("$", "top level must be an object")
    page = {}
    for key, props in obj.items():
        path = f"$.{key}"
        eid = _key_id(key, path)
        if not isinstance(props, dict):
            raise ParseError(path, "element value must be an object")
        for p in props:
            if p not in RP_INDEX:
                raise UnknownParameter(f"{path}.{p}: unknown rendering parameter")
        vec = np.empty(W, dtype=np.int64)
        for k, p in enumerate(RP_NAMES):
            if p not in props:
                if p in vocab.pad_params:
                    vec[k] = PAD
                    continue
                raise ParseError(f"{path}.{p}", "missing")
            try:
                vec[k] = parse_token(p, props[p], vocab, strict=strict)
            except CodecError as e:
                raise UnparseableValue(f"{path}.{p}: {e}") from e
        page[eid] = vec
    return page


def from_json(text, vocab=DEFAULT_VOCAB, strict=True):
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"$ (line {e.lineno} col {e.colno})", e.msg) from e
    return page_from_obj(obj, vocab, strict)


# ---- CSS -------------------------------------------------------------------

def emit_css(page, vocab=DEFAULT_VOCAB):
    """One absolutely positioned class rule per element; PAD slots are omitted."""
    rules = []
    for eid in sorted(page):
        vec = np.asarray(page[eid])
        viol = validate_vector(vec, vocab)
        if viol:
            raise InvalidVector(f"{element_key(eid)}: {'; '.join(v.message for v in viol)}")
        lines = [f".{element_key(eid)} {{", "  position: absolute;"]
        for k, p in enumerate(RP_NAMES):
            if vec[k] != PAD:
                lines.append(f"  {p}: {format_token(p, vec[k], vocab)};")
        lines.append("}")
        rules.append("\n".join(lines))
    return "\n".join(rules) + ("\n" if rules else "")


_RULE_RE = re.compile(r"\.(ele\d+)\s*\{([^}]*)\}")


def parse_css_rules(text, vocab=DEFAULT_VOCAB):
    """Read back CSS in the form written by ``emit_css``."""
    page = {}
    for m in _RULE_RE.finditer(text):
        key = m.group(1)
        props = {}
        for decl in m.group(2).split(";"):
            if not decl.strip():
                continue
            name, sep, val = decl.partition(":")
            if not sep:
                raise ParseError(f".{key}", f"bad declaration {decl.strip()!r}")
            name = name.strip().lower()
            if name == "position":
                continue
            props[name] = val.strip()
        page.update(page_from_obj({key: props}, vocab))
    return page
