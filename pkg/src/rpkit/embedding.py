"""Per-element HTML embedding: projected semantic + XPath + character-count terms.

The semantic source is pluggable. ``HashedBagEncoder`` is a deterministic
stand-in (average of hashed random token vectors); ``PrecomputedEncoder`` reads
vectors exported from any external encoder as JSON lines
``{"page_id", "element_id", "vector"}``.
"""
from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from rpkit import codec, html
from rpkit.nn import Embedding, Linear, Module
from rpkit.nn import tensor as T
from rpkit.nn.layers import DEFAULT_DTYPE

D_MODEL = 128
D_SEM = 128
MAX_DEPTH = 50
MAX_SUBSCRIPT = 256
N_CHAR_BUCKETS = 37

_WORD = re.compile(r"[A-Za-z0-9$€£%.,]+|[^\sA-Za-z0-9]")


class EncoderFailure(RuntimeError):
    pass


# ---- semantic ----------------------------------------------------------------

def element_tokens(element):
    """Content tokens of an element: its direct text and attribute values.

    The tag name is left out; it reaches the model through the XPath term.
    """
    toks = [w.lower() for w in _WORD.findall(element.text or "")]
    for k, v in sorted((element.attrs or {}).items()):
        if k in ("style",):
            continue
        toks.append(f"@{k}")
        toks.extend(f"@{k}={w.lower()}" for w in _WORD.findall(v))
    return toks


class SemanticEncoder:
    dim = D_SEM

    def encode(self, tokens):
        raise NotImplementedError

    def encode_element(self, element, page_id=None):
        return self.encode(element_tokens(element))


class HashedBagEncoder(SemanticEncoder):
    """Mean of fixed pseudo-random unit-scale vectors keyed by token hash."""

    def __init__(self, dim=D_SEM, seed=0):
        self.dim = dim
        self.seed = seed
        self._vec = lru_cache(maxsize=65536)(self._token_vector)

    def _token_vector(self, tok):
        h = hashlib.blake2b(f"{self.seed}:{tok}".encode(), digest_size=8).digest()
        rng = np.random.default_rng(int.from_bytes(h, "little"))
        return rng.standard_normal(self.dim) / np.sqrt(self.dim)

    def encode(self, tokens):
        if not tokens:
            return np.zeros(self.dim)
        return np.mean([self._vec(t) for t in tokens], axis=0)


class PrecomputedEncoder(SemanticEncoder):
    def __init__(self, table, dim=None):
        self.table = {(str(p), int(e)): np.asarray(v, dtype=np.float64) for (p, e), v in table.items()}
        dims = {v.shape[0] for v in self.table.values()}
        if len(dims) > 1:
            raise EncoderFailure(f"inconsistent vector widths {sorted(dims)}")
        self.dim = dim or (dims.pop() if dims else D_SEM)

    @classmethod
    def from_jsonl(cls, path):
        table = {}
        with open(path) as f:
            for n, line in enumerate(f, 1):
                if not line.strip():
                    continue
                try:
                    o = json.loads(line)
                    table[(str(o["page_id"]), int(o["element_id"]))] = o["vector"]
                except (KeyError, ValueError) as e:
                    raise EncoderFailure(f"{path}:{n}: {e}") from e
        return cls(table)

    def encode(self, tokens):
        raise EncoderFailure("precomputed vectors are looked up by (page_id, element_id)")

    def encode_element(self, element, page_id=None):
        try:
            return self.table[(str(page_id), int(element.id))]
        except KeyError:
            raise EncoderFailure(f"no precomputed vector for page {page_id!r} element {element.id}") from None


def write_precomputed(path, rows):
    """Write ``(page_id, element_id, vector)`` triples as JSON lines."""
    with open(path, "w") as f:
        for pid, eid, vec in rows:
            f.write(json.dumps({"page_id": pid, "element_id": int(eid),
                                "vector": [float(x) for x in vec]}) + "\n")


def semantic_embed(element, encoder, page_id=None):
    vec = np.asarray(encoder.encode_element(element, page_id), dtype=np.float64)
    if vec.shape != (encoder.dim,) or not np.isfinite(vec).all():
        raise EncoderFailure(f"encoder returned bad vector of shape {vec.shape}")
    return vec


# ---- hierarchy and character count ---------------------------------------------

class TagVocab:
    """Tag ids for the XPath embedding: 0 is UNK, then the sorted allow-list."""

    def __init__(self, tags=html.DEFAULT_ALLOWED_TAGS):
        self.tags = tuple(sorted(tags))
        self.index = {t: i + 1 for i, t in enumerate(self.tags)}

    def __len__(self):
        return len(self.tags) + 1

    def __call__(self, tag):
        return self.index.get(tag, 0)


def xpath_steps(xpath, tags, max_depth=MAX_DEPTH, max_sub=MAX_SUBSCRIPT):
    """(depth position, tag id, subscript id) per step; overflow shares the last slot."""
    out = []
    for pos, (tag, sub) in enumerate(html.parse_xpath(xpath)):
        out.append((min(pos, max_depth - 1), tags(tag), min(sub, max_sub)))
    return out


def charcount_bucket(k):
    """0..31 map to themselves, then one bucket per power of two, capped at 512+."""
    k = int(k)
    if k < 0:
        raise ValueError("character count must be non-negative")
    if k < 32:
        return k
    return 32 + min(k.bit_length() - 6, 4)


@dataclass
class PageFeatures:
    sem: np.ndarray        # (S, d_sem)
    xp_pos: np.ndarray     # (P,) one entry per XPath step
    xp_tag: np.ndarray
    xp_sub: np.ndarray
    xp_owner: np.ndarray   # element row of each step
    bucket: np.ndarray     # (S,)

    @property
    def size(self):
        return self.sem.shape[0]


def featurize_page(page, encoder, tags, page_id=None):
    pid = page_id if page_id is not None else page.name
    sem = np.stack([semantic_embed(e, encoder, pid) for e in page.elements])
    pos, tag, sub, own = [], [], [], []
    for row, e in enumerate(page.elements):
        for p, t, s in xpath_steps(e.xpath, tags):
            pos.append(p)
            tag.append(t)
            sub.append(s)
            own.append(row)
    bucket = np.array([charcount_bucket(e.char_count) for e in page.elements])
    as_i = lambda a: np.asarray(a, dtype=np.int64)
    return PageFeatures(sem, as_i(pos), as_i(tag), as_i(sub), as_i(own), as_i(bucket))


@dataclass
class Batch:
    sem: np.ndarray        # (B, S, d_sem)
    xp_pos: np.ndarray
    xp_tag: np.ndarray
    xp_sub: np.ndarray
    xp_owner: np.ndarray   # flat row index into B * S
    bucket: np.ndarray     # (B, S)
    valid: np.ndarray      # (B, S) bool
    tokens: np.ndarray | None = None  # (B, S, 13)

    @property
    def shape(self):
        return self.valid.shape


def collate(features, tokens=None, dtype=DEFAULT_DTYPE):
    """Pad a list of ``PageFeatures`` (and optional (S, 13) token arrays) into a Batch."""
    b = len(features)
    s = max(f.size for f in features)
    d_sem = features[0].sem.shape[1]
    sem = np.zeros((b, s, d_sem), dtype)
    bucket = np.zeros((b, s), np.int64)
    valid = np.zeros((b, s), bool)
    cols = {k: [] for k in ("pos", "tag", "sub", "own")}
    for i, f in enumerate(features):
        n = f.size
        sem[i, :n] = f.sem
        bucket[i, :n] = f.bucket
        valid[i, :n] = True
        cols["pos"].append(f.xp_pos)
        cols["tag"].append(f.xp_tag)
        cols["sub"].append(f.xp_sub)
        cols["own"].append(f.xp_owner + i * s)
    tok = None
    if tokens is not None:
        tok = np.full((b, s, codec.W), codec.PAD, np.int64)
        for i, t in enumerate(tokens):
            tok[i, :len(t)] = t
    cat = lambda k: np.concatenate(cols[k]) if cols[k] else np.zeros(0, np.int64)
    return Batch(sem, cat("pos"), cat("tag"), cat("sub"), cat("own"), bucket, valid, tok)


class XPathEmbedding(Module):
    """Sum over path positions of per-depth tag and subscript embeddings."""

    def __init__(self, n_tags, rng, d=D_MODEL, max_depth=MAX_DEPTH, max_sub=MAX_SUBSCRIPT, dtype=DEFAULT_DTYPE):
        self.n_tags = n_tags
        self.n_sub = max_sub + 1
        self.tag_table = Embedding(max_depth * n_tags, d, rng, dtype)
        self.sub_table = Embedding(max_depth * self.n_sub, d, rng, dtype)

    def __call__(self, pos, tag, sub, owner, n_rows):
        e = self.tag_table(pos * self.n_tags + tag) + self.sub_table(pos * self.n_sub + sub)
        return T.segment_sum(e, owner, n_rows)


class HtmlEmbedder(Module):
    def __init__(self, rng, d=D_MODEL, d_sem=D_SEM, n_tags=None, dtype=DEFAULT_DTYPE, zero=False):
        n_tags = n_tags or len(TagVocab())
        self.d = d
        self.xpath = XPathEmbedding(n_tags, rng, d, dtype=dtype)
        self.charc = Embedding(N_CHAR_BUCKETS, d, rng, dtype)
        self.proj_sem = Linear(d_sem, d, rng, dtype=dtype, zero=zero)
        self.proj_hier = Linear(d, d, rng, dtype=dtype, zero=zero)
        self.proj_charc = Linear(d, d, rng, dtype=dtype, zero=zero)

    def terms(self, batch):
        """The three projected terms, each (B, S, d)."""
        b, s = batch.shape
        sem = self.proj_sem(T.Tensor(batch.sem.astype(self.proj_sem.weight.dtype, copy=False)))
        hier = self.xpath(batch.xp_pos, batch.xp_tag, batch.xp_sub, batch.xp_owner, b * s)
        hier = self.proj_hier(hier.reshape(b, s, self.d))
        charc = self.proj_charc(self.charc(batch.bucket))
        return sem, hier, charc

    def __call__(self, batch):
        sem, hier, charc = self.terms(batch)
        return sem + hier + charc


def xpath_embed(xpath, embedder, tags=None):
    """Un-projected hierarchical embedding of a single XPath, shape (d,)."""
    tags = tags or TagVocab()
    steps = np.asarray(xpath_steps(xpath, tags), dtype=np.int64).reshape(-1, 3)
    own = np.zeros(len(steps), np.int64)
    return embedder.xpath(steps[:, 0], steps[:, 1], steps[:, 2], own, 1).reshape(embedder.d)


def charcount_embed(k, embedder):
    return embedder.charc(np.array([charcount_bucket(k)])).reshape(embedder.d)


def html_embed(page, encoder, embedder, tags=None, page_id=None):
    """(S, d) HTML embeddings for a page, rows in pre-order id order."""
    feats = featurize_page(page, encoder, tags or TagVocab(), page_id)
    return embedder(collate([feats], dtype=embedder.proj_sem.weight.dtype)).reshape(page.size, embedder.d)
