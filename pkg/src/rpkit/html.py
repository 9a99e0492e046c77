"""HTML to element sequences: parsing, pre-order ids, XPaths, sub-page extraction.

Elements are numbered 1..S in DOM pre-order and tagged with an ``ele{N}`` class,
which is also their RP-JSON key and CSS selector.
"""
from __future__ import annotations

import copy
import json
import re
from dataclasses import dataclass, field
from html import escape
from html.parser import HTMLParser

import numpy as np

from rpkit import codec

VOID_TAGS = frozenset({
    "area", "base", "br", "col", "embed", "hr", "img", "input", "link", "meta",
    "param", "source", "track", "wbr",
})
# subtrees never kept: non-visual or non-static content
DROP_TAGS = frozenset({"script", "style", "head", "template", "noscript", "title", "iframe", "svg", "canvas"})
BLOCK_TAGS = frozenset({
    "address", "article", "aside", "blockquote", "div", "dl", "fieldset", "figure",
    "footer", "form", "h1", "h2", "h3", "h4", "h5", "h6", "header", "hr", "main",
    "nav", "ol", "p", "pre", "section", "table", "ul",
})
DEFAULT_ALLOWED_TAGS = frozenset({
    "html", "body", "div", "span", "p", "a", "ul", "ol", "li", "dl", "dt", "dd",
    "h1", "h2", "h3", "h4", "h5", "h6", "img", "button", "input", "label", "form",
    "select", "option", "textarea", "table", "thead", "tbody", "tfoot", "tr", "td",
    "th", "section", "article", "header", "footer", "nav", "main", "aside",
    "strong", "em", "b", "i", "u", "small", "sup", "sub", "figure", "figcaption",
    "blockquote", "pre", "code", "br", "hr",
})

_ELE_CLASS = re.compile(r"^ele(\d+)$")
_WS = re.compile(r"\s+")


class HtmlError(ValueError):
    pass


class MissingLayout(ValueError):
    pass


class DomNode:
    """Element node. ``content`` keeps text and child nodes in source order."""

    __slots__ = ("tag", "attrs", "content", "parent")

    def __init__(self, tag, attrs=None, parent=None):
        self.tag = tag
        self.attrs = dict(attrs or {})
        self.content = []
        self.parent = parent

    @property
    def children(self):
        return [c for c in self.content if isinstance(c, DomNode)]

    @property
    def text_chunks(self):
        return [c for c in self.content if isinstance(c, str)]

    def append(self, child):
        if isinstance(child, DomNode):
            child.parent = self
        self.content.append(child)
        return child

    def __repr__(self):
        return f"<{self.tag} children={len(self.children)}>"


def _is_hidden(tag, attrs):
    if "hidden" in attrs:
        return True
    if tag == "input" and (attrs.get("type") or "").lower() == "hidden":
        return True
    style = (attrs.get("style") or "").replace(" ", "").lower()
    return "display:none" in style or "visibility:hidden" in style


class _TreeBuilder(HTMLParser):
    def __init__(self):
        super().__init__(convert_charrefs=True)
        self.doc = DomNode("#document")
        self.stack = [self.doc]
        self.skip = 0  # depth inside a dropped subtree

    def _close_implied(self, tag):
        cur = self.stack[-1]
        if cur.tag == "p" and (tag in BLOCK_TAGS or tag == "li"):
            self.stack.pop()
            cur = self.stack[-1]
        if tag == "li":
            for i in range(len(self.stack) - 1, 0, -1):
                t = self.stack[i].tag
                if t == "li":
                    del self.stack[i:]
                    break
                if t in ("ul", "ol"):
                    break
        elif tag in ("dt", "dd") and cur.tag in ("dt", "dd"):
            self.stack.pop()
        elif tag == "option" and cur.tag == "option":
            self.stack.pop()
        elif tag in ("td", "th") and cur.tag in ("td", "th"):
            self.stack.pop()
        elif tag == "tr":
            while self.stack[-1].tag in ("td", "th", "tr"):
                self.stack.pop()

    def handle_starttag(self, tag, attrs):
        attrs = {k: (v if v is not None else "") for k, v in attrs}
        void = tag in VOID_TAGS
        if self.skip:
            if not void:
                self.skip += 1
            return
        if tag in DROP_TAGS or _is_hidden(tag, attrs):
            if not void:
                self.skip = 1
            return
        self._close_implied(tag)
        node = self.stack[-1].append(DomNode(tag, attrs))
        if not void:
            self.stack.append(node)

    def handle_startendtag(self, tag, attrs):
        self.handle_starttag(tag, attrs)
        if tag not in VOID_TAGS and not self.skip:
            self.handle_endtag(tag)
        elif tag not in VOID_TAGS and self.skip:
            self.skip -= 1

    def handle_endtag(self, tag):
        if self.skip:
            if tag not in VOID_TAGS:
                self.skip -= 1
            return
        for i in range(len(self.stack) - 1, 0, -1):
            if self.stack[i].tag == tag:
                del self.stack[i:]
                return
        # stray end tag: ignored

    def handle_data(self, data):
        if not self.skip and len(self.stack) > 1:
            self.stack[-1].append(data)


def parse_html(text):
    """Forgiving parse into a ``#document`` node; comments and scripts dropped."""
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as e:
            raise HtmlError(f"input is not UTF-8: {e}") from e
    if not isinstance(text, str):
        raise HtmlError(f"expected HTML text, got {type(text).__name__}")
    b = _TreeBuilder()
    b.feed(text)
    b.close()
    if not b.doc.children:
        raise HtmlError("no elements in input")
    return b.doc


def iter_preorder(tree):
    """Element nodes below ``tree`` (or ``tree`` itself if it is an element) in pre-order."""
    stack = [tree] if tree.tag != "#document" else list(reversed(tree.children))
    while stack:
        n = stack.pop()
        yield n
        stack.extend(reversed(n.children))


def subtree_size(node):
    return sum(1 for _ in iter_preorder(node))


def normalize_ws(s):
    return _WS.sub(" ", s).strip()


def direct_text(node):
    return normalize_ws("".join(node.text_chunks))


def char_count(node):
    """Characters of the node's own text (children excluded), whitespace-normalised."""
    return len(direct_text(node))


def compute_xpath(node):
    steps = []
    while node is not None and node.tag != "#document":
        parent = node.parent
        if parent is None:
            idx = 1
        else:
            idx = 0
            for sib in parent.children:
                if sib.tag == node.tag:
                    idx += 1
                if sib is node:
                    break
        steps.append(f"{node.tag}[{idx}]")
        node = parent
    return "/" + "/".join(reversed(steps))


_STEP = re.compile(r"^([^\[\]/]+)\[(\d+)\]$")


def parse_xpath(xpath):
    """``"/html[1]/body[1]"`` -> ``[("html", 1), ("body", 1)]``."""
    if not xpath.startswith("/"):
        raise ValueError(f"not an absolute xpath: {xpath!r}")
    out = []
    for step in xpath[1:].split("/"):
        m = _STEP.match(step)
        if not m:
            raise ValueError(f"bad xpath step {step!r} in {xpath!r}")
        out.append((m.group(1), int(m.group(2))))
    return out


def resolve_xpath(tree, xpath):
    node = tree
    for tag, idx in parse_xpath(xpath):
        hits = [c for c in node.children if c.tag == tag]
        if len(hits) < idx:
            raise KeyError(xpath)
        node = hits[idx - 1]
    return node


@dataclass
class Element:
    id: int
    tag: str
    xpath: str
    char_count: int
    depth: int
    parent_id: int | None
    text: str = ""
    attrs: dict = field(default_factory=dict, repr=False)
    node: DomNode | None = field(default=None, repr=False, compare=False)

    def to_obj(self):
        return {"id": self.id, "tag": self.tag, "xpath": self.xpath, "char_count": self.char_count,
                "depth": self.depth, "parent_id": self.parent_id}


def _set_ele_class(node, eid):
    classes = [c for c in node.attrs.get("class", "").split() if not _ELE_CLASS.match(c)]
    classes.append(f"ele{eid}")
    node.attrs["class"] = " ".join(classes)


def ele_class_id(node):
    """Id carried by an existing ``ele{N}`` class, or None."""
    for c in node.attrs.get("class", "").split():
        m = _ELE_CLASS.match(c)
        if m:
            return int(m.group(1))
    return None


def preorder_elements(tree):
    """Number element nodes 1..S in pre-order and tag each with an ``ele{N}`` class."""
    ids = {}
    out = []
    for eid, node in enumerate(iter_preorder(tree), start=1):
        ids[id(node)] = eid
        parent_id = ids.get(id(node.parent)) if node.parent is not None else None
        xp = compute_xpath(node)
        attrs = {k: v for k, v in node.attrs.items() if k != "class"}
        cls = " ".join(c for c in node.attrs.get("class", "").split() if not _ELE_CLASS.match(c))
        if cls:
            attrs["class"] = cls
        _set_ele_class(node, eid)
        out.append(Element(eid, node.tag, xp, char_count(node), xp.count("/") - 1, parent_id,
                           direct_text(node), attrs, node))
    return out


@dataclass
class Page:
    elements: list
    source_html: str = ""
    rps: dict | None = None
    root: DomNode | None = field(default=None, repr=False)
    source_ids: list | None = field(default=None, repr=False)
    name: str = ""

    @property
    def size(self):
        return len(self.elements)

    def token_matrix(self):
        """(S, 13) tokens in element order."""
        if self.rps is None:
            raise MissingLayout("page has no rendering parameters")
        return np.stack([np.asarray(self.rps[e.id], dtype=np.int64) for e in self.elements])

    def children_of(self):
        kids = {e.id: [] for e in self.elements}
        for e in self.elements:
            if e.parent_id is not None:
                kids[e.parent_id].append(e.id)
        return kids


def page_from_tree(tree, rps=None, name=""):
    elements = preorder_elements(tree)
    return Page(elements, serialize_html(tree), rps, tree, None, name)


def page_from_html(text, rps=None, name=""):
    return page_from_tree(parse_html(text), rps, name)


def _detach(node):
    doc = DomNode("#document")
    doc.append(copy.deepcopy(_strip_parent(node)))
    _relink(doc)
    return doc


def _strip_parent(node):
    # deepcopy would otherwise walk up through .parent into the whole document
    saved = node.parent
    node.parent = None
    try:
        return copy.deepcopy(node)
    finally:
        node.parent = saved


def _relink(node):
    stack = [node]
    while stack:
        n = stack.pop()
        for c in n.children:
            c.parent = n
            stack.append(c)


def extract_subpages(tree, min_el=32, max_el=128):
    """Closest-to-root subtrees whose element count lies in ``[min_el, max_el]``.

    A subtree that qualifies is taken whole and not searched further; larger
    subtrees are descended into; smaller ones cannot contain a qualifying subtree.
    Each result is an independent ``Page`` whose root is the sub-page root;
    ``source_ids`` keeps any ``ele{N}`` id the nodes carried before renumbering.
    """
    sizes = {}
    order = list(iter_preorder(tree))
    for n in reversed(order):
        sizes[id(n)] = 1 + sum(sizes[id(c)] for c in n.children)
    out = []
    stack = [tree] if tree.tag != "#document" else list(reversed(tree.children))
    while stack:
        n = stack.pop()
        s = sizes[id(n)]
        if min_el <= s <= max_el:
            sub = _detach(n)
            src = [ele_class_id(x) for x in iter_preorder(sub)]
            page = page_from_tree(sub)
            page.source_ids = src
            out.append(page)
        elif s > max_el:
            stack.extend(reversed(n.children))
    return out


def clean_subpage(page, allowed=DEFAULT_ALLOWED_TAGS):
    """Drop elements whose tag is not allowed, promoting their content in place.

    ``<img>`` is always kept (as a placeholder). RPs, if present, follow their
    elements to the new ids.
    """
    allowed = set(allowed) | {"img"}
    doc = DomNode("#document")
    for c in page.root.children if page.root.tag == "#document" else [page.root]:
        doc.append(copy.deepcopy(_strip_parent(c)))
    _relink(doc)
    before = list(iter_preorder(doc))
    old_id = {id(n): i for i, n in enumerate(before, start=1)}

    def prune(node):
        new = []
        for c in node.content:
            if isinstance(c, DomNode):
                prune(c)
                if c.tag in allowed:
                    new.append(c)
                else:
                    new.extend(c.content)
            else:
                new.append(c)
        node.content = new

    prune(doc)
    _relink(doc)
    if not doc.children:
        raise HtmlError("no allowed elements left after cleaning")
    src_ids = page.source_ids
    kept = list(iter_preorder(doc))
    new_src = [src_ids[old_id[id(n)] - 1] for n in kept] if src_ids else None
    rps = None
    if page.rps is not None:
        rps = {i: page.rps[old_id[id(n)]] for i, n in enumerate(kept, start=1)}
    out = page_from_tree(doc, rps, page.name)
    out.source_ids = new_src
    return out


def normalize_layout(page):
    """Translate all boxes so the minimum left and top are 0."""
    if page.rps is None:
        raise MissingLayout("page has no rendering parameters")
    toks = page.token_matrix()
    if np.any(toks[:, :4] > codec.MAX_PIXEL):
        raise MissingLayout("layout slots must hold pixel tokens")
    dx = toks[:, 0].min()
    dy = toks[:, 1].min()
    rps = {}
    for e, row in zip(page.elements, toks):
        v = row.copy()
        v[0] -= dx
        v[1] -= dy
        rps[e.id] = v
    return Page(page.elements, page.source_html, rps, page.root, page.source_ids, page.name)


def serialize_html(node):
    parts = []

    def emit(n):
        if n.tag != "#document":
            attrs = "".join(f' {k}="{escape(v, quote=True)}"' if v != "" else f" {k}"
                            for k, v in n.attrs.items())
            parts.append(f"<{n.tag}{attrs}>")
        for c in n.content:
            if isinstance(c, str):
                parts.append(escape(c, quote=False))
            else:
                emit(c)
        if n.tag != "#document" and n.tag not in VOID_TAGS:
            parts.append(f"</{n.tag}>")

    stack_safe = subtree_size(node) < 800
    if stack_safe:
        emit(node)
    else:  # pragma: no cover - very deep documents
        import sys
        old = sys.getrecursionlimit()
        sys.setrecursionlimit(max(old, 10 * subtree_size(node)))
        try:
            emit(node)
        finally:
            sys.setrecursionlimit(old)
    return "".join(parts)


def page_to_obj(page, vocab=codec.DEFAULT_VOCAB):
    return {"elements": [e.to_obj() for e in page.elements],
            "rps": codec.page_to_obj(page.rps, vocab) if page.rps is not None else None}


def page_to_json(page, vocab=codec.DEFAULT_VOCAB):
    return json.dumps(page_to_obj(page, vocab), indent=2) + "\n"


def page_from_json(text, vocab=codec.DEFAULT_VOCAB):
    obj = json.loads(text)
    els = [Element(int(o["id"]), o["tag"], o["xpath"], int(o["char_count"]), int(o["depth"]),
                   o["parent_id"]) for o in obj["elements"]]
    rps = codec.page_from_obj(obj["rps"], vocab) if obj.get("rps") is not None else None
    return Page(els, "", rps)
