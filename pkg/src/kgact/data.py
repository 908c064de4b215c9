"""Dataset ingestion and preprocessing for the unified user/entity graph.

Index space: users occupy [0, U), KG entities occupy [U, U + N_e) with items
aligned to the first item-count entity slots (an item and its entity share
one index). Interactions are stored item-local; ``item_node``/``user_node``
map into the unified node space the adjacency is built over.

File formats (TSV, UTF-8, one record per line):
    interactions:  <user_id>\t<item_id>
    triples:       <head_id>\t<relation>\t<tail_id>
    vocabularies:  <string>\t<index>
"""

import os
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .precision import default_dtype


class ParseError(ValueError):
    """A data file line does not match the documented schema."""


class SamplingError(RuntimeError):
    """Negative sampling cannot proceed (a user interacted with every item)."""


class ConfigError(ValueError):
    """A synthetic-dataset spec is infeasible."""


@dataclass
class KgDataset:
    num_users: int
    num_items: int
    num_entities: int
    train: np.ndarray                 # (n, 2) int32 of (user, item)
    val: np.ndarray
    test: np.ndarray
    triples: np.ndarray               # (n, 3) int32 of (head, relation, tail)
    user_vocab: dict[str, int]
    entity_vocab: dict[str, int]
    relation_vocab: dict[str, int]
    _train_pos: list[set] | None = field(default=None, repr=False)

    @property
    def num_nodes(self) -> int:
        return self.num_users + self.num_entities

    def user_node(self, user: int) -> int:
        return user

    def item_node(self, item) -> np.ndarray | int:
        return self.num_users + item

    def train_positives(self) -> list[set]:
        """Per-user set of train items (cached)."""
        if self._train_pos is None:
            pos = [set() for _ in range(self.num_users)]
            for u, i in self.train:
                pos[u].add(int(i))
            self._train_pos = pos
        return self._train_pos

    def validate(self) -> None:
        for name, arr in (("train", self.train), ("val", self.val), ("test", self.test)):
            if len(arr):
                if arr[:, 0].min() < 0 or arr[:, 0].max() >= self.num_users:
                    raise ValueError(f"{name}: user index out of range")
                if arr[:, 1].min() < 0 or arr[:, 1].max() >= self.num_items:
                    raise ValueError(f"{name}: item index out of range")
        seen = set()
        for arr in (self.train, self.val, self.test):
            for u, i in arr:
                key = (int(u), int(i))
                if key in seen:
                    raise ValueError(f"pair {key} appears in more than one split")
                seen.add(key)
        if len(self.triples):
            ends = self.triples[:, [0, 2]]
            if ends.min() < 0 or ends.max() >= self.num_entities:
                raise ValueError("triple endpoint out of entity range")
            rels = self.triples[:, 1]
            if rels.min() < 0 or rels.max() >= len(self.relation_vocab):
                raise ValueError("triple relation out of range")
        if self.num_items > self.num_entities:
            raise ValueError("items must be a prefix of the entity space")


# ---------------------------------------------------------------------------
# TSV parsing
# ---------------------------------------------------------------------------

def _index(vocab: dict, key: str) -> int:
    if key not in vocab:
        vocab[key] = len(vocab)
    return vocab[key]


def load_interactions(path):
    """Parse a user-item TSV; indices are assigned in first-seen order.

    Exact duplicate pairs are dropped. Returns (pairs, user_vocab, item_vocab).
    """
    user_vocab: dict[str, int] = {}
    item_vocab: dict[str, int] = {}
    pairs = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0] or not parts[1]:
                raise ParseError(f"{path}:{lineno}: expected <user>\\t<item>, got {line!r}")
            u = _index(user_vocab, parts[0])
            i = _index(item_vocab, parts[1])
            if (u, i) in seen:
                continue
            seen.add((u, i))
            pairs.append((u, i))
    return np.array(pairs, dtype=np.int32).reshape(-1, 2), user_vocab, item_vocab


def load_triples(path, entity_vocab=None, relation_vocab=None, strict=False):
    """Parse a head/relation/tail TSV, extending the given vocabularies.

    Pass the item vocabulary as the starting entity vocabulary to align items
    with their entities. With ``strict`` a relation absent from the given
    vocabulary raises instead of being added.
    """
    entity_vocab = {} if entity_vocab is None else dict(entity_vocab)
    relation_vocab = {} if relation_vocab is None else dict(relation_vocab)
    triples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3 or not all(parts):
                raise ParseError(
                    f"{path}:{lineno}: expected <head>\\t<relation>\\t<tail>, got {line!r}")
            h = _index(entity_vocab, parts[0])
            if strict and parts[1] not in relation_vocab:
                raise ParseError(f"{path}:{lineno}: unknown relation {parts[1]!r}")
            r = _index(relation_vocab, parts[1])
            t = _index(entity_vocab, parts[2])
            triples.append((h, r, t))
    return (np.array(triples, dtype=np.int32).reshape(-1, 3),
            entity_vocab, relation_vocab)


def save_vocab(path, vocab: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key, idx in sorted(vocab.items(), key=lambda kv: kv[1]):
            fh.write(f"{key}\t{idx}\n")


def load_vocab(path) -> dict:
    vocab = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError(f"{path}:{lineno}: expected <string>\\t<index>")
            vocab[parts[0]] = int(parts[1])
    return vocab


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------

def kcore_filter(pairs: np.ndarray, k: int) -> np.ndarray:
    """Iteratively drop users/items with degree < k until a fixpoint."""
    if k < 1:
        raise ValueError("k must be >= 1")
    pairs = np.asarray(pairs)
    while len(pairs):
        u_ids, u_deg = np.unique(pairs[:, 0], return_counts=True)
        i_ids, i_deg = np.unique(pairs[:, 1], return_counts=True)
        good_u = set(u_ids[u_deg >= k].tolist())
        good_i = set(i_ids[i_deg >= k].tolist())
        keep = np.array([(u in good_u) and (i in good_i) for u, i in pairs], dtype=bool)
        if keep.all():
            break
        pairs = pairs[keep]
    return pairs.reshape(-1, 2)


def split_interactions(pairs: np.ndarray, seed: int,
                       train_frac: float = 0.8, val_frac: float = 0.1):
    """Per-user random split: 80% of each history to the train pool, the rest
    to test, then 10% of the pool to validation. Users with fewer than three
    interactions keep everything in train."""
    rng = np.random.default_rng(seed)
    by_user: dict[int, list[int]] = {}
    order: list[int] = []
    for u, i in pairs:
        u = int(u)
        if u not in by_user:
            by_user[u] = []
            order.append(u)
        by_user[u].append(int(i))
    train, val, test = [], [], []
    for u in order:
        items = by_user[u]
        if len(items) < 3:
            train.extend((u, i) for i in items)
            continue
        perm = rng.permutation(len(items))
        n_pool = int(np.floor(train_frac * len(items)))
        pool = [items[j] for j in perm[:n_pool]]
        test.extend((u, items[j]) for j in perm[n_pool:])
        n_val = min(int(val_frac * len(pool) + 0.5), len(pool) - 1)
        val.extend((u, i) for i in pool[:n_val])
        train.extend((u, i) for i in pool[n_val:])
    to_arr = lambda rows: np.array(rows, dtype=np.int32).reshape(-1, 2)
    return to_arr(train), to_arr(val), to_arr(test)


def build_adjacency(ds: KgDataset, dtype=None) -> sp.csr_matrix:
    """Symmetric degree-normalized adjacency with self-loops.

    The pattern is the undirected union of train interactions and KG triples
    (relation types collapsed, multi-edges deduplicated); values are
    (A + I)_ij / sqrt(deg_i * deg_j) with degrees taken from A + I.
    """
    dt = np.dtype(dtype) if dtype is not None else default_dtype()
    n = ds.num_nodes
    heads = []
    tails = []
    if len(ds.train):
        heads.append(ds.train[:, 0].astype(np.int64))
        tails.append(ds.item_node(ds.train[:, 1].astype(np.int64)))
    if len(ds.triples):
        heads.append(ds.num_users + ds.triples[:, 0].astype(np.int64))
        tails.append(ds.num_users + ds.triples[:, 2].astype(np.int64))
    if heads:
        a = np.concatenate(heads)
        b = np.concatenate(tails)
        lo = np.minimum(a, b)
        hi = np.maximum(a, b)
        keep = lo != hi
        enc = np.unique(lo[keep] * n + hi[keep])
        lo, hi = enc // n, enc % n
        rows = np.concatenate([lo, hi, np.arange(n, dtype=np.int64)])
        cols = np.concatenate([hi, lo, np.arange(n, dtype=np.int64)])
    else:
        rows = cols = np.arange(n, dtype=np.int64)
    ones = np.ones(len(rows), dtype=np.float64)
    adj = sp.coo_matrix((ones, (rows, cols)), shape=(n, n)).tocsr()
    adj.sum_duplicates()
    adj.sort_indices()
    deg = np.asarray(adj.sum(axis=1)).ravel()
    inv_sqrt = 1.0 / np.sqrt(deg)
    adj.data = (adj.data * inv_sqrt[rows_from_csr(adj)] * inv_sqrt[adj.indices]).astype(dt)
    return adj


def rows_from_csr(m: sp.csr_matrix) -> np.ndarray:
    """Row index of every stored value (expanded from indptr)."""
    return np.repeat(np.arange(m.shape[0], dtype=np.int64), np.diff(m.indptr))


def sample_negatives(ds: KgDataset, rng: np.random.Generator,
                     pairs: np.ndarray | None = None) -> np.ndarray:
    """One uniform negative per train pair, rejecting the user's train items."""
    if pairs is None:
        pairs = ds.train
    pos = ds.train_positives()
    for u in np.unique(pairs[:, 0]):
        if len(pos[int(u)]) >= ds.num_items:
            raise SamplingError(f"user {int(u)} has interacted with every item")
    n = len(pairs)
    neg = rng.integers(0, ds.num_items, size=n, dtype=np.int64)
    pending = np.array([neg[j] in pos[int(pairs[j, 0])] for j in range(n)])
    while pending.any():
        idx = np.nonzero(pending)[0]
        redraw = rng.integers(0, ds.num_items, size=len(idx), dtype=np.int64)
        neg[idx] = redraw
        pending[idx] = [redraw[t] in pos[int(pairs[idx[t], 0])] for t in range(len(idx))]
    out = np.empty((n, 3), dtype=np.int32)
    out[:, :2] = pairs
    out[:, 2] = neg
    return out


# ---------------------------------------------------------------------------
# Synthetic datasets
# ---------------------------------------------------------------------------

@dataclass
class SynthSpec:
    """Deterministic block-structured dataset: user groups prefer item groups,
    items link to shared attribute entities, and item popularity is skewed so
    a popularity baseline separates from both random and trained models."""
    users: int = 500
    items: int = 300
    entities: int = 1000
    relations: int = 5
    groups: int = 10
    interactions_per_user: float = 6.0
    group_affinity: float = 0.85
    zipf: float = 0.8
    attr_links_per_item: float = 1.0

    def validate(self) -> None:
        if self.items > self.entities:
            raise ConfigError("items must fit inside the entity space")
        if self.groups > self.items or self.groups < 1:
            raise ConfigError("need 1 <= groups <= items")
        if self.interactions_per_user > self.items:
            raise ConfigError("interaction density exceeds 1 (more draws than items)")
        if self.relations < 1 or self.entities < self.items + self.groups:
            raise ConfigError("need at least one relation and room for group hubs")
        if not 0.0 <= self.group_affinity <= 1.0:
            raise ConfigError("group_affinity must be in [0, 1]")


_SYNTH_FIELDS = {f: t for f, t in SynthSpec.__annotations__.items()}


def parse_synth_spec(text: str) -> SynthSpec:
    """Spec from 'default' or comma/newline separated key=value overrides."""
    spec = SynthSpec()
    text = text.strip()
    if text and text != "default":
        body = text[len("default,"):] if text.startswith("default,") else text
        for raw in body.replace("\n", ",").split(","):
            raw = raw.strip()
            if not raw:
                continue
            if "=" not in raw:
                raise ConfigError(f"expected key=value, got {raw!r}")
            key, value = raw.split("=", 1)
            key = key.strip()
            if key not in _SYNTH_FIELDS:
                raise ConfigError(f"unknown synthetic spec key {key!r}")
            kind = _SYNTH_FIELDS[key]
            setattr(spec, key, int(value) if kind is int else float(value))
    spec.validate()
    return spec


def _zipf_weights(n: int, exponent: float) -> np.ndarray:
    w = 1.0 / np.power(np.arange(1, n + 1, dtype=np.float64), exponent)
    return w / w.sum()


def synth_generate(spec: SynthSpec, seed: int) -> KgDataset:
    spec.validate()
    rng = np.random.default_rng(seed)
    item_group = np.arange(spec.items) % spec.groups
    user_group = rng.integers(0, spec.groups, size=spec.users)

    global_w = _zipf_weights(spec.items, spec.zipf)
    group_items = [np.nonzero(item_group == g)[0] for g in range(spec.groups)]
    group_w = []
    for g in range(spec.groups):
        w = _zipf_weights(len(group_items[g]), spec.zipf)
        group_w.append(w)

    pairs = set()
    for u in range(spec.users):
        want = min(3 + rng.poisson(max(spec.interactions_per_user - 3.0, 0.0)),
                   spec.items)
        g = user_group[u]
        chosen: set[int] = set()
        guard = 0
        while len(chosen) < want and guard < 50 * want:
            guard += 1
            if rng.random() < spec.group_affinity:
                item = int(rng.choice(group_items[g], p=group_w[g]))
            else:
                item = int(rng.choice(spec.items, p=global_w))
            chosen.add(item)
        pairs.update((u, i) for i in chosen)
    all_pairs = np.array(sorted(pairs), dtype=np.int32)

    hub = spec.items + item_group            # one attribute hub per group
    triples = {(int(i), 0, int(hub[i])) for i in range(spec.items)}
    n_extra = rng.poisson(spec.attr_links_per_item, size=spec.items)
    free_attrs = np.arange(spec.items + spec.groups, spec.entities)
    for i in range(spec.items):
        for _ in range(int(n_extra[i])):
            if len(free_attrs) == 0 or spec.relations < 2:
                break
            t = int(rng.choice(free_attrs))
            r = int(rng.integers(1, spec.relations))
            triples.add((int(i), r, t))
    triples_arr = np.array(sorted(triples), dtype=np.int32)

    train, val, test = split_interactions(all_pairs, seed)
    user_vocab = {f"u{u:04d}": u for u in range(spec.users)}
    entity_vocab = {f"i{i:04d}": i for i in range(spec.items)}
    for a in range(spec.items, spec.entities):
        entity_vocab[f"a{a:04d}"] = a
    relation_vocab = {f"rel{r}": r for r in range(spec.relations)}
    ds = KgDataset(spec.users, spec.items, spec.entities, train, val, test,
                   triples_arr, user_vocab, entity_vocab, relation_vocab)
    ds.validate()
    return ds


# ---------------------------------------------------------------------------
# Directory round trip
# ---------------------------------------------------------------------------

def save_dataset(ds: KgDataset, outdir: str) -> None:
    """Write interactions/triples plus vocabulary sidecars."""
    os.makedirs(outdir, exist_ok=True)
    inv_user = {v: k for k, v in ds.user_vocab.items()}
    inv_ent = {v: k for k, v in ds.entity_vocab.items()}
    inv_rel = {v: k for k, v in ds.relation_vocab.items()}
    all_pairs = np.concatenate([ds.train, ds.val, ds.test]) if len(ds.train) else ds.train
    order = np.lexsort((all_pairs[:, 1], all_pairs[:, 0])) if len(all_pairs) else []
    with open(os.path.join(outdir, "interactions.tsv"), "w", encoding="utf-8") as fh:
        for j in order:
            u, i = all_pairs[j]
            fh.write(f"{inv_user[int(u)]}\t{inv_ent[int(i)]}\n")
    with open(os.path.join(outdir, "triples.tsv"), "w", encoding="utf-8") as fh:
        for h, r, t in ds.triples:
            fh.write(f"{inv_ent[int(h)]}\t{inv_rel[int(r)]}\t{inv_ent[int(t)]}\n")
    save_vocab(os.path.join(outdir, "users.vocab.tsv"), ds.user_vocab)
    save_vocab(os.path.join(outdir, "entities.vocab.tsv"), ds.entity_vocab)
    save_vocab(os.path.join(outdir, "relations.vocab.tsv"), ds.relation_vocab)
    items = {k: v for k, v in ds.entity_vocab.items() if v < ds.num_items}
    save_vocab(os.path.join(outdir, "items.vocab.tsv"), items)


def load_dataset(datadir: str, seed: int, kcore: int = 0) -> KgDataset:
    """Load a dataset directory and split it deterministically.

    Vocabulary sidecars, when present, pin the index assignment (and the
    item/entity alignment); otherwise indices follow first-seen order with
    triples extending the item vocabulary.
    """
    ipath = os.path.join(datadir, "interactions.tsv")
    tpath = os.path.join(datadir, "triples.tsv")
    pairs, user_vocab, item_vocab = load_interactions(ipath)
    uv_path = os.path.join(datadir, "users.vocab.tsv")
    ev_path = os.path.join(datadir, "entities.vocab.tsv")
    rv_path = os.path.join(datadir, "relations.vocab.tsv")
    if os.path.exists(uv_path) and os.path.exists(ev_path):
        full_user = load_vocab(uv_path)
        full_entity = load_vocab(ev_path)
        full_rel = load_vocab(rv_path) if os.path.exists(rv_path) else None
        remap_u = np.array([full_user[k] for k in user_vocab], dtype=np.int64)
        remap_i = np.array([full_entity[k] for k in item_vocab], dtype=np.int64)
        if len(pairs):
            pairs = np.stack([remap_u[pairs[:, 0]], remap_i[pairs[:, 1]]], axis=1)
        items_path = os.path.join(datadir, "items.vocab.tsv")
        if os.path.exists(items_path):
            num_items = len(load_vocab(items_path))
        else:
            num_items = int(remap_i.max(initial=-1) + 1)
        if os.path.exists(tpath):
            triples, entity_vocab, relation_vocab = load_triples(
                tpath, full_entity, full_rel, strict=full_rel is not None)
        else:
            triples = np.zeros((0, 3), dtype=np.int32)
            entity_vocab, relation_vocab = full_entity, full_rel or {}
        user_vocab = full_user
        num_users = len(full_user)
    else:
        if os.path.exists(tpath):
            triples, entity_vocab, relation_vocab = load_triples(tpath, item_vocab)
        else:
            triples, entity_vocab, relation_vocab = (np.zeros((0, 3), dtype=np.int32),
                                                     dict(item_vocab), {})
        num_users = len(user_vocab)
        num_items = len(item_vocab)
    if kcore > 0 and len(pairs):
        pairs = kcore_filter(pairs, kcore)
    train, val, test = split_interactions(pairs.astype(np.int32), seed)
    ds = KgDataset(num_users, num_items, len(entity_vocab),
                   train, val, test, np.asarray(triples, dtype=np.int32),
                   user_vocab, entity_vocab, relation_vocab)
    ds.validate()
    return ds
