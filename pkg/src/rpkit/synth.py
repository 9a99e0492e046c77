"""Synthetic web pages with known rendering parameters.

Every page has the same skeleton: a header with a title and a navigation list,
a grid of cards (image, paragraph, label, button) and a footer with a short
list. Boxes sit on a grid so many edges line up, and elements are assigned to
style groups by role so every group shares all nine style tokens.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from html import escape

import numpy as np

from rpkit import codec
from rpkit import html as H

WORDS = ("fresh", "deal", "shop", "new", "price", "home", "garden", "kitchen", "sale", "cart",
         "order", "today", "free", "shipping", "blue", "light", "classic", "modern", "wood",
         "steel", "lamp", "chair", "table", "sofa", "offer", "bundle", "gift", "best", "seller",
         "review", "stock", "size", "color", "style", "season", "outdoor", "premium", "basic")

ROLES = ("page", "header", "title", "nav", "nav-item", "nav-link", "main", "card", "image",
         "body", "label", "button", "footer", "footer-text", "footer-list", "footer-item")


class BadSpec(ValueError):
    pass


@dataclass
class SynthSpec:
    min_elements: int = 32
    max_elements: int = 128
    grid_columns: tuple = (2, 3, 4)
    page_widths: tuple = (960, 1200, 1440)
    style_groups: int | None = None       # None: drawn from style_group_range
    style_group_range: tuple = (3, 6)
    palette_size: int = 12
    words_per_text: tuple = (1, 12)

    def __post_init__(self):
        self.grid_columns = tuple(self.grid_columns)
        self.page_widths = tuple(self.page_widths)
        self.style_group_range = tuple(self.style_group_range)
        self.words_per_text = tuple(self.words_per_text)
        if not 24 <= self.min_elements <= self.max_elements:
            raise BadSpec("need 24 <= min_elements <= max_elements")
        if self.max_elements > 160:
            raise BadSpec("max_elements above 160 does not fit the canvas")
        if not self.grid_columns or min(self.grid_columns) < 1:
            raise BadSpec("grid_columns must list positive integers")
        if not self.page_widths or max(self.page_widths) > codec.MAX_PIXEL or min(self.page_widths) < 480:
            raise BadSpec("page widths must lie in [480, 1920]")
        if self.style_groups is not None and not 1 <= self.style_groups <= len(ROLES):
            raise BadSpec(f"style_groups must lie in [1, {len(ROLES)}]")
        lo, hi = self.style_group_range
        if not 1 <= lo <= hi <= len(ROLES):
            raise BadSpec("bad style_group_range")
        if not 2 <= self.palette_size <= 46:
            raise BadSpec("palette_size must lie in [2, 46]")
        if not 0 <= self.words_per_text[0] <= self.words_per_text[1]:
            raise BadSpec("bad words_per_text")

    def to_dict(self):
        return asdict(self)


@dataclass
class _Node:
    tag: str
    role: str
    text: str = ""
    attrs: dict = field(default_factory=dict)
    box: tuple = (0, 0, 0, 0)
    kids: list = field(default_factory=list)


def _words(rng, lo, hi):
    n = int(rng.integers(lo, hi + 1))
    return " ".join(WORDS[i] for i in rng.integers(0, len(WORDS), size=n))


def _style_table(rng, n_groups, palette_size):
    colors = rng.choice(46, size=palette_size, replace=False) + 1921
    styles, seen = [], set()
    while len(styles) < n_groups:
        fs = int(rng.choice([12, 13, 14, 16, 18, 20, 24, 28, 32]))
        lh = 1979 if rng.random() < 0.3 else min(50, fs + int(rng.integers(2, 12)))
        key = (
            1967 + int(rng.choice(3, p=[0.8, 0.15, 0.05])),
            1970 + int(rng.choice([3, 3, 4, 6, 8])),
            fs, lh,
            1980 + int(rng.integers(0, 6)),
            1986 + int(rng.random() < 0.2),
            1988 + int(rng.choice(4, p=[0.7, 0.15, 0.1, 0.05])),
            int(rng.choice(colors)),
            int(rng.choice(colors)),
        )
        if key not in seen:
            seen.add(key)
            styles.append(key)
    return styles


def _role_groups(rng, n_groups):
    """Assign every role to a group, using each of the ``n_groups`` at least once."""
    order = rng.permutation(len(ROLES))
    groups = np.empty(len(ROLES), np.int64)
    groups[order[:n_groups]] = np.arange(n_groups)
    rest = order[n_groups:]
    groups[rest] = rng.integers(0, n_groups, size=len(rest))
    return {r: int(g) for r, g in zip(ROLES, groups)}


def _text_height(text, width, fs, lh):
    line = fs + 4 if lh == 1979 else lh
    per_line = max(1, int(width / max(1.0, 0.55 * fs)))
    return line * max(1, math.ceil(len(text) / per_line))


def _plan_counts(rng, spec):
    n = int(rng.integers(spec.min_elements, spec.max_elements + 1))
    k = int(rng.integers(3, 7))             # navigation items
    m = int(rng.integers(2, 5))             # footer items
    fixed = 1 + 3 + 2 * k + 1 + 3 + m       # page, header block, main, footer block
    cards, extra = divmod(n - fixed, 5)
    if cards < 1:
        raise BadSpec("element budget too small for the page skeleton")
    return k, m + extra, cards


def _build(rng, spec):
    k, m, cards = _plan_counts(rng, spec)
    width = int(rng.choice(spec.page_widths))
    pad, gap = 20, 16
    wlo, whi = spec.words_per_text

    root = _Node("div", "page", attrs={"id": "page"})
    header = _Node("div", "header", attrs={"class": "site-header"}, box=(0, 0, width, 80))
    title = _Node("h2", "title", _words(rng, 1, 3).title(), box=(pad, 20, width // 3, 40))
    nav = _Node("ul", "nav", attrs={"class": "nav"})
    nav_x = width // 2
    item_w = max(40, (width - nav_x - pad) // k)
    for i in range(k):
        x = nav_x + i * item_w
        li = _Node("li", "nav-item", box=(x, 24, item_w - 8, 32))
        li.kids.append(_Node("a", "nav-link", _words(rng, 1, 2), {"href": f"/p{i}"}, (x + 4, 28, item_w - 16, 24)))
        nav.kids.append(li)
    nav.box = (nav_x, 20, k * item_w, 40)
    header.kids = [title, nav]

    cols = int(rng.choice(spec.grid_columns))
    rows = math.ceil(cards / cols)
    if rows > 6:
        cols = math.ceil(cards / 6)
        rows = math.ceil(cards / cols)
    cw = (width - 2 * pad - (cols - 1) * gap) // cols
    avail = codec.MAX_PIXEL - 80 - 200 - 2 * pad
    ch = int(min(360, avail // rows - gap))
    ih = ch // 2
    main = _Node("div", "main", attrs={"class": "grid"},
                 box=(0, 80, width, 2 * pad + rows * (ch + gap) - gap))
    for i in range(cards):
        r, c = divmod(i, cols)
        x, y = pad + c * (cw + gap), 80 + pad + r * (ch + gap)
        card = _Node("div", "card", attrs={"class": "card"}, box=(x, y, cw, ch))
        card.kids = [
            _Node("img", "image", attrs={"src": f"/img/{i}.jpg", "alt": _words(rng, 1, 3)},
                  box=(x + 8, y + 8, cw - 16, ih)),
            _Node("p", "body", _words(rng, wlo, whi), box=(x + 8, y + ih + 16, cw - 16, 0)),
            _Node("span", "label", f"${int(rng.integers(5, 500))}.99", box=(x + 8, y + ch - 84, cw // 2, 0)),
            _Node("button", "button", _words(rng, 1, 2).title(), box=(x + 8, y + ch - 48, min(cw - 16, 120), 40)),
        ]
        main.kids.append(card)

    fy = main.box[1] + main.box[3]
    footer = _Node("div", "footer", attrs={"class": "footer"}, box=(0, fy, width, 200))
    ftext = _Node("p", "footer-text", _words(rng, wlo, whi), box=(pad, fy + 16, width // 2 - pad, 0))
    flist = _Node("ul", "footer-list", box=(width // 2, fy + 16, width // 2 - pad, 0))
    fh = max(12, min(32, 168 // m))
    for i in range(m):
        flist.kids.append(_Node("li", "footer-item", _words(rng, 1, 3), box=(width // 2, fy + 16 + i * fh, width // 2 - pad, fh)))
    flist.box = flist.box[:3] + (m * fh,)
    footer.kids = [ftext, flist]
    root.kids = [header, main, footer]
    root.box = (0, 0, width, fy + 200)
    return root


def _preorder(node):
    yield node
    for kid in node.kids:
        yield from _preorder(kid)


def _to_html(node):
    attrs = "".join(f' {k}="{escape(v)}"' for k, v in node.attrs.items())
    if node.tag == "img":
        return f"<img{attrs}>"
    inner = escape(node.text) + "".join(_to_html(k) for k in node.kids)
    return f"<{node.tag}{attrs}>{inner}</{node.tag}>"


def _clip(v):
    return int(min(max(v, 0), codec.MAX_PIXEL))


def synth_tree(spec=None, seed=0):
    """Return ``(html_text, {id: token vector})`` for one synthetic page."""
    spec = spec or SynthSpec()
    rng = np.random.default_rng(seed)
    root = _build(rng, spec)
    if spec.style_groups is not None:
        n_groups = spec.style_groups
    else:
        n_groups = int(rng.integers(spec.style_group_range[0], spec.style_group_range[1] + 1))
    styles = _style_table(rng, n_groups, spec.palette_size)
    groups = _role_groups(rng, n_groups)
    rps = {}
    for eid, node in enumerate(_preorder(root), start=1):
        style = styles[groups[node.role]]
        x, y, w, h = node.box
        if h == 0:
            h = _text_height(node.text, w, style[2], style[3])
        vec = np.array([_clip(x), _clip(y), _clip(w), _clip(h), *style], dtype=np.int64)
        rps[eid] = vec
    return _to_html(root) + "\n", rps


def synth_page(spec=None, seed=0, name=None):
    """Return ``(html_text, rp_json_text)``; the page is already top-left normalized."""
    text, rps = synth_tree(spec, seed)
    return text, codec.to_json(rps)


def synth_pages(n, spec=None, seed=0):
    """``n`` parsed ``html.Page`` objects; page ``i`` uses seed ``seed * 100003 + i``."""
    pages = []
    for i in range(n):
        s = seed * 100003 + i
        text, rps = synth_tree(spec, s)
        page = H.page_from_html(text, rps, name=f"synth-{s}")
        if page.size != len(rps):
            raise AssertionError("synthetic page re-parse changed the element count")
        pages.append(page)
    return pages
