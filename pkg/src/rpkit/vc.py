"""Visual complexity: colour richness + size diversity + misalignment.

Pages whose total falls below a threshold (0.1 by default) are too plain to
keep as training samples.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from rpkit import codec, kernels
from rpkit.html import MissingLayout


class MissingStyle(ValueError):
    pass


@dataclass(frozen=True)
class VcReport:
    vc_color: float
    vc_size: float
    vc_alg: float
    vc_total: float

    def to_dict(self):
        return asdict(self)


def _tokens(page):
    if page.rps is None:
        raise MissingLayout("page has no rendering parameters")
    try:
        return page.token_matrix()
    except KeyError as e:
        raise MissingLayout(f"element {e} has no rendering parameters") from None


def vc_color(page):
    toks = _tokens(page)
    col = toks[:, codec.RP_INDEX["color"]]
    bg = toks[:, codec.RP_INDEX["background-color"]]
    if np.any(col == codec.PAD) or np.any(bg == codec.PAD):
        raise MissingStyle("color/background-color missing (PAD) on some element")
    n = len(toks)
    return (len(np.unique(col)) + len(np.unique(bg)) - 2) / (2 * n)


def _layout(page):
    toks = _tokens(page)
    lay = toks[:, :4]
    if np.any(lay > codec.MAX_PIXEL):
        raise MissingLayout("layout slots must hold pixel tokens")
    return lay


def vc_size(page):
    lay = _layout(page)
    row = {e.id: i for i, e in enumerate(page.elements)}
    terms = []
    for kids in page.children_of().values():
        if not kids:
            continue
        sizes = {(int(lay[row[k], 2]), int(lay[row[k], 3])) for k in kids}
        terms.append((len(sizes) - 1) / len(kids))
    return float(np.mean(terms)) if terms else 0.0


def vc_alignment(page):
    lay = _layout(page)
    kids = page.children_of()
    leaf = np.array([not kids[e.id] for e in page.elements])
    n = int(leaf.sum())
    if n < 2:
        return 0.0
    l, t, w, h = (lay[leaf, k].astype(np.int64) for k in range(4))
    aligned = kernels.aligned_pair_count(l, t, l + w, t + h)
    return 1.0 - aligned / (n * (n - 1))


def vc_total(page):
    c, s, a = vc_color(page), vc_size(page), vc_alignment(page)
    return VcReport(float(c), float(s), float(a), float(c + s + a))


def passes_filter(report, threshold=0.1):
    return report.vc_total >= threshold
