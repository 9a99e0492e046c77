"""Dataset directories: cleaned HTML + RP-JSON per sample, and a JSON manifest.

Layout written by ``build_dataset``::

    out/NAME.html        cleaned sub-page HTML (elements carry ele{N} classes)
    out/NAME.rps.json    RP-JSON keyed by pre-order id
    out/manifest.json    sample list with split tags and build settings
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from rpkit import codec, synth
from rpkit import html as H
from rpkit import vc as VC

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
MANIFEST_VERSION = 1
VOCAB_VERSION = "web46-v1"


class EmptyAfterFilter(ValueError):
    pass


class DatasetError(ValueError):
    pass


@dataclass
class Sample:
    name: str
    page: H.Page
    vc: float


def subpages_from_document(text, rps, name, min_el=32, max_el=128, allowed=H.DEFAULT_ALLOWED_TAGS):
    """Cut a rendered document into cleaned, top-left normalized sub-pages.

    ``rps`` is keyed by the pre-order id of each element in the full document.
    Sub-pages with elements lacking RPs are skipped.
    """
    tree = H.parse_html(text)
    H.preorder_elements(tree)
    out = []
    for i, sub in enumerate(H.extract_subpages(tree, min_el, max_el)):
        if any(s not in rps for s in sub.source_ids):
            log.warning("%s: sub-page %d has elements without RPs; skipped", name, i)
            continue
        sub.rps = {e.id: np.asarray(rps[s], dtype=np.int64) for e, s in zip(sub.elements, sub.source_ids)}
        try:
            page = H.normalize_layout(H.clean_subpage(sub, allowed))
        except H.HtmlError as e:
            log.warning("%s: sub-page %d dropped: %s", name, i, e)
            continue
        page.name = f"{name}-{i:03d}"
        out.append(page)
    return out


def _score(page):
    try:
        return VC.vc_total(page).vc_total
    except (VC.MissingStyle, H.MissingLayout) as e:
        log.warning("%s: no VC score (%s); dropped", page.name, e)
        return None


def split_names(names, split, seed):
    """Seeded shuffle of the sorted names; the first ``round(split * n)`` are train."""
    if not 0 <= split <= 1:
        raise ValueError("split must lie in [0, 1]")
    names = sorted(names)
    order = np.random.default_rng(seed).permutation(len(names))
    n_train = int(round(split * len(names)))
    return {names[j]: ("train" if r < n_train else "test") for r, j in enumerate(order)}


def write_dataset(pages, out_dir, vc_threshold=0.1, split=0.8, seed=0, source=None):
    """Filter by VC, split, write sample files and the manifest. Returns the manifest dict."""
    out_dir = Path(out_dir)
    scored = [(p, _score(p)) for p in pages]
    kept = [(p, v) for p, v in scored if v is not None and v >= vc_threshold]
    if not kept:
        raise EmptyAfterFilter(f"no page reaches VC >= {vc_threshold} ({len(pages)} candidates)")
    names = [p.name for p, _ in kept]
    if len(set(names)) != len(names):
        raise DatasetError("duplicate sample names")
    tags = split_names(names, split, seed)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for page, v in sorted(kept, key=lambda pv: pv[0].name):
        html_path = f"{page.name}.html"
        rps_path = f"{page.name}.rps.json"
        (out_dir / html_path).write_text(page.source_html + "\n")
        (out_dir / rps_path).write_text(codec.to_json(page.rps))
        entries.append({"name": page.name, "html": html_path, "rps": rps_path,
                        "split": tags[page.name], "elements": page.size, "vc": round(v, 12)})
    manifest = {
        "format_version": MANIFEST_VERSION,
        "vocabulary": VOCAB_VERSION,
        "vc_threshold": vc_threshold,
        "split_ratio": split,
        "seed": seed,
        "source": source or {},
        "candidates": len(pages),
        "samples": entries,
    }
    (out_dir / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _pairs(input_dir):
    input_dir = Path(input_dir)
    if not input_dir.is_dir():
        raise DatasetError(f"{input_dir} is not a directory")
    pairs = []
    for html_path in sorted(input_dir.glob("*.html")):
        rps_path = html_path.with_name(html_path.stem + ".rps.json")
        if rps_path.exists():
            pairs.append((html_path.stem, html_path, rps_path))
        else:
            log.warning("%s has no matching .rps.json; skipped", html_path.name)
    return pairs


def ingest_pages(input_dir, min_el=32, max_el=128, workers=1, strict=True):
    def one(item):
        name, html_path, rps_path = item
        rps = codec.from_json(rps_path.read_text(), strict=strict)
        return subpages_from_document(html_path.read_text(), rps, name, min_el, max_el)

    pairs = _pairs(input_dir)
    with ThreadPoolExecutor(max_workers=max(1, workers)) as ex:
        results = list(ex.map(one, pairs))
    return [p for group in results for p in group]


def build_dataset(out_dir, input_dir=None, spec=None, n_pages=100, vc_threshold=0.1, split=0.8,
                  seed=0, workers=1):
    """Build from an ingest directory of ``NAME.html`` + ``NAME.rps.json`` pairs, or synthesize."""
    if input_dir is not None:
        pages = ingest_pages(input_dir, workers=workers)
        source = {"kind": "ingest", "input": Path(input_dir).name}
    else:
        spec = spec or synth.SynthSpec()
        pages = synth.synth_pages(n_pages, spec, seed)
        source = {"kind": "synth", "pages": n_pages, "spec": spec.to_dict()}
    return write_dataset(pages, out_dir, vc_threshold, split, seed, source)


def read_manifest(data_dir):
    path = Path(data_dir) / MANIFEST
    if not path.exists():
        raise DatasetError(f"no {MANIFEST} in {data_dir}")
    return json.loads(path.read_text())


def load_page(html_path, rps_path=None, name=None):
    """Parse a sample's HTML and attach its RPs (ids are pre-order in the HTML)."""
    html_path = Path(html_path)
    page = H.page_from_html(html_path.read_text(), name=name or html_path.name.split(".")[0])
    if rps_path is not None:
        rps = codec.from_json(Path(rps_path).read_text())
        if sorted(rps) != [e.id for e in page.elements]:
            raise DatasetError(f"{rps_path}: element ids do not match {html_path.name}")
        page.rps = rps
    return page


def load_dataset(data_dir, split=None):
    """Pages listed in the manifest, optionally only one split, in manifest order."""
    data_dir = Path(data_dir)
    out = []
    for s in read_manifest(data_dir)["samples"]:
        if split is None or s["split"] == split:
            out.append(load_page(data_dir / s["html"], data_dir / s["rps"], s["name"]))
    return out


def load_rps_dir(path):
    """``{name: page dict}`` for every ``NAME.rps.json`` in a directory."""
    path = Path(path)
    if not path.is_dir():
        raise DatasetError(f"{path} is not a directory")
    return {p.name[:-len(".rps.json")]: codec.from_json(p.read_text()) for p in sorted(path.glob("*.rps.json"))}
