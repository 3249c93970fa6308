"""Multimodal embedding and interaction-log datasets.

Binary embedding format (MMQE): magic "MMQE", u32 version=1, u32 N,
u32 D_t, u32 D_v, then N records of (u64 item_id, D_t float32 LE,
D_v float32 LE). Interaction logs are UTF-8 TSV with a required header
``user_id  item_id  timestamp  label``.

Synthetic generators build clustered multimodal items with a controllable
content/behavior gap, so paradigm and fine-tuning effects are observable
at desk scale. Everything is a pure function of (config, seed).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .tensor import FormatError, NumericError, ShapeError

EMBEDDING_MAGIC = b"MMQE"
EMBEDDING_VERSION = 1

INTERACTION_COLUMNS = ("user_id", "item_id", "timestamp", "label")


@dataclass
class MultimodalEmbedding:
    item_id: int
    e_t: np.ndarray
    e_v: np.ndarray


class EmbeddingDataset:
    """Column-major store of per-item text and vision embeddings."""

    def __init__(self, item_ids, text, vision):
        self.item_ids = np.ascontiguousarray(item_ids, dtype=np.uint64)
        self.text = np.ascontiguousarray(text, dtype=np.float32)
        self.vision = np.ascontiguousarray(vision, dtype=np.float32)
        if self.text.ndim != 2 or self.vision.ndim != 2:
            raise ShapeError("text/vision must be 2-D (N x D)")
        n = len(self.item_ids)
        if self.text.shape[0] != n or self.vision.shape[0] != n:
            raise ShapeError("item_ids, text, vision row counts differ")
        if len(np.unique(self.item_ids)) != n:
            raise ValueError("item_ids must be unique")
        if n and not (np.all(np.isfinite(self.text)) and np.all(np.isfinite(self.vision))):
            raise NumericError("non-finite embedding entries")

    @property
    def n_items(self):
        return len(self.item_ids)

    @property
    def d_text(self):
        return self.text.shape[1]

    @property
    def d_vision(self):
        return self.vision.shape[1]

    def __len__(self):
        return self.n_items

    def __getitem__(self, i) -> MultimodalEmbedding:
        return MultimodalEmbedding(int(self.item_ids[i]), self.text[i], self.vision[i])

    def index_of(self):
        """item_id -> row index map."""
        return {int(t): i for i, t in enumerate(self.item_ids)}

    def concat_embeddings(self) -> np.ndarray:
        return np.concatenate([self.text, self.vision], axis=1)

    def normalized(self) -> "EmbeddingDataset":
        """Per-modality row L2 normalization (pretrained-encoder scales differ)."""
        def norm(m):
            n = np.linalg.norm(m, axis=1, keepdims=True)
            n[n == 0] = 1.0
            return (m / n).astype(np.float32)

        return EmbeddingDataset(self.item_ids, norm(self.text), norm(self.vision))


def write_embeddings(dataset: EmbeddingDataset, path) -> None:
    with open(path, "wb") as f:
        f.write(EMBEDDING_MAGIC)
        f.write(struct.pack("<IIII", EMBEDDING_VERSION, dataset.n_items,
                            dataset.d_text, dataset.d_vision))
        for i in range(dataset.n_items):
            f.write(struct.pack("<Q", int(dataset.item_ids[i])))
            f.write(np.ascontiguousarray(dataset.text[i], dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(dataset.vision[i], dtype="<f4").tobytes())


def _read_exact(f, n, what):
    data = f.read(n)
    if len(data) != n:
        raise FormatError(f"truncated embedding file reading {what} at byte offset {f.tell() - len(data)}")
    return data


def read_embeddings(path) -> EmbeddingDataset:
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != EMBEDDING_MAGIC:
            raise FormatError(f"bad magic {magic!r} at byte offset 0")
        version, n, d_t, d_v = struct.unpack("<IIII", _read_exact(f, 16, "header"))
        if version != EMBEDDING_VERSION:
            raise FormatError(f"unsupported embedding version {version} at byte offset 4")
        ids = np.empty(n, dtype=np.uint64)
        text = np.empty((n, d_t), dtype=np.float32)
        vision = np.empty((n, d_v), dtype=np.float32)
        rec = 8 + 4 * (d_t + d_v)
        for i in range(n):
            raw = _read_exact(f, rec, f"record {i}")
            (ids[i],) = struct.unpack_from("<Q", raw, 0)
            text[i] = np.frombuffer(raw, dtype="<f4", count=d_t, offset=8)
            vision[i] = np.frombuffer(raw, dtype="<f4", count=d_v, offset=8 + 4 * d_t)
        trailing = f.read(1)
        if trailing:
            raise FormatError(f"trailing bytes at byte offset {f.tell() - 1}")
    return EmbeddingDataset(ids, text, vision)


class InteractionDataset:
    """(user, item, timestamp, label) event log, per-user time-ordered."""

    def __init__(self, user_ids, item_ids, timestamps, labels):
        self.user_ids = np.ascontiguousarray(user_ids, dtype=np.uint64)
        self.item_ids = np.ascontiguousarray(item_ids, dtype=np.uint64)
        self.timestamps = np.ascontiguousarray(timestamps, dtype=np.uint64)
        self.labels = np.ascontiguousarray(labels, dtype=np.int8)
        n = len(self.user_ids)
        if not (len(self.item_ids) == len(self.timestamps) == len(self.labels) == n):
            raise ShapeError("interaction columns differ in length")
        if np.any((self.labels != 0) & (self.labels != 1)):
            raise ValueError("labels must be 0 or 1")
        self._check_ordering()

    def _check_ordering(self):
        order = np.argsort(self.user_ids, kind="stable")
        u = self.user_ids[order]
        t = self.timestamps[order]
        same_user = u[1:] == u[:-1]
        if np.any(same_user & (t[1:] < t[:-1])):
            raise ValueError("per-user events must be ordered by timestamp")

    def __len__(self):
        return len(self.user_ids)

    @property
    def n_users(self):
        return len(np.unique(self.user_ids))

    def positives(self) -> "InteractionDataset":
        m = self.labels == 1
        return InteractionDataset(self.user_ids[m], self.item_ids[m],
                                  self.timestamps[m], self.labels[m])

    def by_user(self):
        """user_id -> (item_ids, timestamps, labels), time-ordered."""
        if len(self) == 0:
            return {}
        out = {}
        order = np.lexsort((self.timestamps, self.user_ids))
        u = self.user_ids[order]
        bounds = np.flatnonzero(np.diff(u)) + 1
        for chunk in np.split(order, bounds):
            uid = int(self.user_ids[chunk[0]])
            out[uid] = (self.item_ids[chunk], self.timestamps[chunk], self.labels[chunk])
        return out


def write_interactions(ds: InteractionDataset, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("\t".join(INTERACTION_COLUMNS) + "\n")
        for u, it, t, lb in zip(ds.user_ids, ds.item_ids, ds.timestamps, ds.labels):
            f.write(f"{u}\t{it}\t{t}\t{lb}\n")


def read_interactions(path) -> InteractionDataset:
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().rstrip("\n")
        if tuple(header.split("\t")) != INTERACTION_COLUMNS:
            raise FormatError(f"bad interaction header: {header!r}")
        cols = [[], [], [], []]
        for lineno, line in enumerate(f, start=2):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 4:
                raise FormatError(f"line {lineno}: expected 4 columns, got {len(parts)}")
            for c, v in zip(cols, parts):
                c.append(int(v))
    return InteractionDataset(*[np.array(c, dtype=np.uint64) for c in cols[:3]],
                              np.array(cols[3], dtype=np.int8))


# --------------------------------------------------------------------------
# Synthetic generation
# --------------------------------------------------------------------------

@dataclass
class SyntheticConfig:
    n_items: int = 5000
    n_users: int = 2000
    n_clusters: int = 100
    d_text: int = 256
    d_vision: int = 256
    content_noise: float = 0.1
    modality_unique_frac: float = 0.5
    p_gap: float = 0.0
    seq_len: int = 30
    seed: int = 0
    zipf_exponent: float = 1.1
    negatives_ratio: int = 4
    pref_alpha: float = 0.3
    shared_latent_dim: int = 64

    def __post_init__(self):
        if self.n_clusters > self.n_items:
            raise ValueError("n_clusters must be <= n_items")
        for name in ("modality_unique_frac", "p_gap"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.negatives_ratio < 0:
            raise ValueError("negatives_ratio must be >= 0")


def factorize_clusters(n_clusters: int):
    """Split a cluster id into complementary (text, vision) facet ids, as
    balanced as possible: c -> (c % m, c // m)."""
    m = int(np.ceil(np.sqrt(n_clusters)))
    return m, int(np.ceil(n_clusters / m))


def gen_synthetic_items(cfg: SyntheticConfig):
    """Clustered multimodal items with complementary modality-unique facets.

    Each cluster owns a shared latent (projected into both modality spaces)
    and two facet latents: the text facet depends on c % m, the vision facet
    on c // m, so with modality_unique_frac near 1 the full cluster identity
    is only recoverable from both modalities together. content_noise adds
    per-item Gaussian jitter. Returns (EmbeddingDataset, content labels).
    """
    rng = np.random.default_rng(cfg.seed)
    dh = cfg.shared_latent_dim
    h = rng.normal(size=(cfg.n_clusters, dh))
    proj_t = rng.normal(scale=1.0 / np.sqrt(dh), size=(dh, cfg.d_text))
    proj_v = rng.normal(scale=1.0 / np.sqrt(dh), size=(dh, cfg.d_vision))
    shared_t = h @ proj_t
    shared_v = h @ proj_v

    m_t, m_v = factorize_clusters(cfg.n_clusters)
    facet_t = rng.normal(size=(m_t, cfg.d_text))
    facet_v = rng.normal(size=(m_v, cfg.d_vision))
    cluster_ids = np.arange(cfg.n_clusters)
    uniq_t = facet_t[cluster_ids % m_t]
    uniq_v = facet_v[cluster_ids // m_t]

    w = cfg.modality_unique_frac
    center_t = (1.0 - w) * shared_t + w * uniq_t
    center_v = (1.0 - w) * shared_v + w * uniq_v

    labels = rng.integers(0, cfg.n_clusters, size=cfg.n_items)
    e_t = center_t[labels] + cfg.content_noise * rng.normal(size=(cfg.n_items, cfg.d_text))
    e_v = center_v[labels] + cfg.content_noise * rng.normal(size=(cfg.n_items, cfg.d_vision))

    ids = np.arange(cfg.n_items, dtype=np.uint64)
    ds = EmbeddingDataset(ids, e_t.astype(np.float32), e_v.astype(np.float32))
    return ds, labels.astype(np.int64)


def behavioral_clusters(content_labels: np.ndarray, cfg: SyntheticConfig) -> np.ndarray:
    """Content clusters re-drawn with probability p_gap to a different cluster."""
    rng = np.random.default_rng((cfg.seed, 1))
    labels = content_labels.copy()
    if cfg.n_clusters < 2 or cfg.p_gap == 0.0:
        return labels
    flip = rng.random(len(labels)) < cfg.p_gap
    offsets = rng.integers(1, cfg.n_clusters, size=len(labels))
    labels[flip] = (labels[flip] + offsets[flip]) % cfg.n_clusters
    return labels


def gen_synthetic_interactions(items: EmbeddingDataset, content_labels: np.ndarray,
                               cfg: SyntheticConfig) -> InteractionDataset:
    """Per-user positive sequences plus optional uniform negatives.

    Users draw a Dirichlet preference over behavioral clusters; each positive
    samples a cluster by preference then an item inside the cluster by Zipf
    weight. Negatives (label 0) are uniform over the catalog at
    negatives_ratio per positive, timestamped after the positives.
    """
    rng = np.random.default_rng((cfg.seed, 2))
    n_items = items.n_items
    beh = behavioral_clusters(content_labels, cfg)

    ranks = rng.permutation(n_items)
    zipf_w = 1.0 / np.power(ranks + 1.0, cfg.zipf_exponent)

    members = [np.flatnonzero(beh == c) for c in range(cfg.n_clusters)]
    member_w = []
    nonempty = np.array([len(m) > 0 for m in members])
    for m in members:
        w = zipf_w[m]
        member_w.append(w / w.sum() if len(m) else w)

    users, items_col, ts, labels = [], [], [], []
    alpha = np.full(cfg.n_clusters, cfg.pref_alpha)
    for u in range(cfg.n_users):
        pref = rng.dirichlet(alpha)
        pref = np.where(nonempty, pref, 0.0)
        pref = pref / pref.sum()
        clusters = rng.choice(cfg.n_clusters, size=cfg.seq_len, p=pref)
        for t, c in enumerate(clusters):
            i = members[c][rng.choice(len(members[c]), p=member_w[c])]
            users.append(u)
            items_col.append(items.item_ids[i])
            ts.append(t)
            labels.append(1)
        n_neg = cfg.negatives_ratio * cfg.seq_len
        if n_neg:
            neg = rng.integers(0, n_items, size=n_neg)
            users.extend([u] * n_neg)
            items_col.extend(items.item_ids[neg])
            ts.extend(range(cfg.seq_len, cfg.seq_len + n_neg))
            labels.extend([0] * n_neg)

    return InteractionDataset(np.array(users, dtype=np.uint64),
                              np.array(items_col, dtype=np.uint64),
                              np.array(ts, dtype=np.uint64),
                              np.array(labels, dtype=np.int8))


# --------------------------------------------------------------------------
# Popularity strata
# --------------------------------------------------------------------------

POPULAR, MIDDLE, LONG_TAIL = "popular", "middle", "long_tail"


@dataclass
class PopularityStrata:
    item_ids: np.ndarray          # sorted by (count desc, item_id asc)
    counts: np.ndarray            # aligned with item_ids
    strata: np.ndarray            # stratum name per item, aligned
    quantiles: tuple = (0.25, 0.75)
    _lookup: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._lookup = {int(t): s for t, s in zip(self.item_ids, self.strata)}

    def stratum_of(self, item_id) -> str:
        return self._lookup[int(item_id)]

    def items_in(self, stratum) -> np.ndarray:
        return self.item_ids[self.strata == stratum]


def popularity_strata(interactions: InteractionDataset,
                      quantiles=(0.25, 0.75)) -> PopularityStrata:
    """Rank items by event count; top quantile popular, bottom long-tail.

    Ties broken by item_id ascending, so with equal counts the lowest ids
    fill the popular stratum first.
    """
    if len(interactions) == 0:
        raise ValueError("popularity_strata needs a non-empty interaction log")
    ids, counts = np.unique(interactions.item_ids, return_counts=True)
    order = np.lexsort((ids, -counts))
    ids, counts = ids[order], counts[order]
    n = len(ids)
    lo, hi = quantiles
    n_pop = int(np.ceil((1.0 - hi) * n))
    n_tail = int(np.floor(lo * n))
    strata = np.full(n, MIDDLE, dtype=object)
    strata[:n_pop] = POPULAR
    if n_tail:
        strata[n - n_tail:] = LONG_TAIL
    return PopularityStrata(ids, counts, strata, quantiles)
