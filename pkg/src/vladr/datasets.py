"""Synthetic identity streams with ground-truth instrumentation, plus
binary embedding-file export/ingestion.

A stream is a sequence of training domains with matching held-out test
sets and additional never-trained domains.  Every instance is a token
sequence in which known slots carry one body-part attribute each (plus
background clutter), so tests can verify exactly where information lives.
Attribute vocabularies are shared by every domain; styles and clutter are
domain-specific.

All emitted arrays are float64 but rounded to float32-representable values
so the binary export format (float32 little-endian) round-trips bitwise.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DEFAULT_ATTRIBUTE_NAMES = ("head", "upper_body", "lower_body", "foot")

TOKEN_MAGIC = b"VLTK"
ATTR_MAGIC = b"VLTA"
FILE_VERSION = 1
LABEL_HEADER = ["item_id", "identity", "camera", "domain"]


class StreamConfigError(ValueError):
    """Generator parameters are infeasible."""


class IngestError(ValueError):
    """An embedding/label file is malformed; message names file and offset."""


class SamplingError(ValueError):
    """The dataset cannot satisfy the requested batch layout."""


def _round_f32(a: np.ndarray) -> np.ndarray:
    return a.astype(np.float32).astype(np.float64)


def _unit(rng: np.random.Generator, d: int) -> np.ndarray:
    v = rng.standard_normal(d)
    return v / np.linalg.norm(v)


@dataclass
class GenParams:
    """Knobs of the synthetic stream generator (desk-scale defaults)."""

    domains: int = 5
    unseen_domains: int = 2
    ids_per_domain: int = 32
    test_ids_per_domain: int = 32
    imgs_per_id: int = 8
    seq_len: int = 17
    dim: int = 32
    n_attributes: int = 4
    values_per_attribute: int = 6
    tokens_per_attribute: int = 3
    cameras: int = 4
    noise_sigma: float = 0.08
    latent_norm: float = 0.5
    style_norm: float = 1.0
    clutter_norm: float = 1.2
    clutter_sigma: float = 0.5

    def validate(self):
        for name in (
            "domains",
            "unseen_domains",
            "ids_per_domain",
            "test_ids_per_domain",
            "imgs_per_id",
            "seq_len",
            "dim",
            "n_attributes",
            "values_per_attribute",
            "tokens_per_attribute",
            "cameras",
        ):
            if getattr(self, name) <= 0:
                raise StreamConfigError(f"{name} must be positive")
        if self.n_attributes * self.tokens_per_attribute + 1 > self.seq_len:
            raise StreamConfigError(
                f"seq_len={self.seq_len} cannot host {self.n_attributes} attributes x "
                f"{self.tokens_per_attribute} tokens plus a background slot"
            )
        for name in ("noise_sigma", "latent_norm", "style_norm", "clutter_norm", "clutter_sigma"):
            if getattr(self, name) < 0:
                raise StreamConfigError(f"{name} must be nonnegative")


class AttributeCatalog:
    """Shared attribute vocabulary with paired text/visual codebooks.

    Each attribute owns ``values_per_attribute`` categorical values.  A value
    has a unit-norm text codebook vector and a visual codebook vector that is
    the image of the text vector under one hidden orthogonal map, fixed for
    the whole stream.  Value ids are globally unique integers.
    """

    def __init__(self, names, queries, text_codes, vis_codes, hidden_map):
        self.names = tuple(names)
        self.queries = tuple(queries)
        self.text_codes = text_codes  # (N_a, C, d)
        self.vis_codes = vis_codes
        self.hidden_map = hidden_map

    @classmethod
    def build(cls, rng: np.random.Generator, params: GenParams) -> "AttributeCatalog":
        n, c, d = params.n_attributes, params.values_per_attribute, params.dim
        if n <= len(DEFAULT_ATTRIBUTE_NAMES):
            names = DEFAULT_ATTRIBUTE_NAMES[:n]
        else:
            names = DEFAULT_ATTRIBUTE_NAMES + tuple(f"part_{i}" for i in range(len(DEFAULT_ATTRIBUTE_NAMES), n))
        queries = tuple(f"describe the person's {name.replace('_', ' ')}" for name in names)
        text = np.stack([[_unit(rng, d) for _ in range(c)] for _ in range(n)])
        q, _ = np.linalg.qr(rng.standard_normal((d, d)))
        vis = text @ q.T
        vis /= np.linalg.norm(vis, axis=-1, keepdims=True)
        return cls(names, queries, _round_f32(text), _round_f32(vis), q)

    @property
    def n_attributes(self) -> int:
        return self.text_codes.shape[0]

    @property
    def values_per_attribute(self) -> int:
        return self.text_codes.shape[1]

    @property
    def dim(self) -> int:
        return self.text_codes.shape[2]

    def attribute_of(self, value: int) -> int:
        return value // self.values_per_attribute

    def values_of(self, attribute: int):
        c = self.values_per_attribute
        return range(attribute * c, (attribute + 1) * c)

    def text_code(self, value: int) -> np.ndarray:
        p, j = divmod(value, self.values_per_attribute)
        return self.text_codes[p, j]

    def vis_code(self, value: int) -> np.ndarray:
        p, j = divmod(value, self.values_per_attribute)
        return self.vis_codes[p, j]


@dataclass(frozen=True)
class Identity:
    """One person: a fixed attribute-value assignment plus a private latent."""

    id: int
    attr_values: tuple
    latent: np.ndarray


@dataclass(frozen=True)
class InstanceRecord:
    """One observation of an identity in one domain.

    ``ownership[j]`` names the attribute carried by token ``j`` (-1 means
    background); it is ``None`` for ingested data.  ``text_attr`` holds the
    per-attribute text embeddings, shape (N_a, d).
    """

    item_id: str
    tokens: np.ndarray
    identity: int
    camera: int
    domain: int
    ownership: np.ndarray | None
    text_attr: np.ndarray


class DomainDataset:
    """Immutable set of instances from one domain and split.

    Instance access goes through :meth:`all` / :meth:`fetch`, which notify
    the attached access monitor (if any) so the sequential-training contract
    can be audited.
    """

    def __init__(
        self,
        domain_id: int,
        split: str,
        instances,
        catalog: AttributeCatalog | None = None,
        identities=None,
        style_offset: np.ndarray | None = None,
        clutter_mean: np.ndarray | None = None,
        clutter_sigma: float | None = None,
    ):
        self.domain_id = domain_id
        self.split = split
        self._instances = tuple(instances)
        self.catalog = catalog
        self.identities = tuple(identities) if identities is not None else ()
        self.style_offset = style_offset
        self.clutter_mean = clutter_mean
        self.clutter_sigma = clutter_sigma
        self.monitor = None

    def __len__(self) -> int:
        return len(self._instances)

    @property
    def n_t(self) -> int:
        return len(self._instances)

    @property
    def has_ownership(self) -> bool:
        return all(r.ownership is not None for r in self._instances)

    def _touch(self):
        if self.monitor is not None:
            self.monitor.notify(self)

    def all(self):
        self._touch()
        return self._instances

    def fetch(self, indices):
        self._touch()
        return [self._instances[i] for i in indices]

    def identity_ids(self):
        seen = {}
        for r in self._instances:
            seen.setdefault(r.identity, None)
        return list(seen)

    def indices_by_identity(self):
        groups: dict[int, list[int]] = {}
        for i, r in enumerate(self._instances):
            groups.setdefault(r.identity, []).append(i)
        return groups


@dataclass
class StreamBundle:
    """Everything one run consumes: train domains, matching test sets,
    never-trained test sets, and the shared catalog."""

    train: list
    seen_tests: list
    unseen_tests: list
    catalog: AttributeCatalog
    params: GenParams

    def all_datasets(self):
        return [*self.train, *self.seen_tests, *self.unseen_tests]


def _make_identities(rng, catalog, count, start_id, latent_norm):
    out = []
    c = catalog.values_per_attribute
    for k in range(count):
        values = tuple(
            int(p * c + rng.integers(c)) for p in range(catalog.n_attributes)
        )
        latent = _unit(rng, catalog.dim) * latent_norm
        out.append(Identity(id=start_id + k, attr_values=values, latent=latent))
    return out


def render_domain(
    catalog: AttributeCatalog,
    identities,
    params: GenParams,
    style_offset: np.ndarray,
    clutter_mean: np.ndarray,
    rng: np.random.Generator,
    domain_id: int,
    split: str,
) -> DomainDataset:
    """Materialize instances for ``identities`` under one domain's style.

    Attribute tokens are ``vis_code(value) + latent + style_offset + noise``
    (rounded to float32); background tokens draw from the domain clutter.
    Token order is shuffled per instance and recorded in the ownership map.
    """
    n_a = catalog.n_attributes
    k_p = params.tokens_per_attribute
    n_bg = params.seq_len - n_a * k_p
    layout = np.concatenate([np.repeat(np.arange(n_a), k_p), np.full(n_bg, -1)])
    instances = []
    for identity in identities:
        text_attr = np.stack([catalog.text_code(v) for v in identity.attr_values])
        for j in range(params.imgs_per_id):
            ownership = rng.permutation(layout)
            tokens = np.empty((params.seq_len, catalog.dim))
            for slot, owner in enumerate(ownership):
                if owner >= 0:
                    tokens[slot] = (
                        catalog.vis_code(identity.attr_values[owner])
                        + identity.latent
                        + style_offset
                        + rng.normal(0.0, params.noise_sigma, catalog.dim)
                    )
                else:
                    tokens[slot] = clutter_mean + rng.normal(0.0, params.clutter_sigma, catalog.dim)
            instances.append(
                InstanceRecord(
                    item_id=f"d{domain_id}-{split}-{identity.id}-{j}",
                    tokens=_round_f32(tokens),
                    identity=identity.id,
                    camera=j % params.cameras,
                    domain=domain_id,
                    ownership=ownership,
                    text_attr=text_attr,
                )
            )
    return DomainDataset(
        domain_id,
        split,
        instances,
        catalog=catalog,
        identities=identities,
        style_offset=style_offset,
        clutter_mean=clutter_mean,
        clutter_sigma=params.clutter_sigma,
    )


def generate_stream(seed: int, params: GenParams | None = None) -> StreamBundle:
    """Build the full synthetic stream deterministically from ``seed``.

    Training domains come with disjoint-identity test sets sharing the
    domain's style; unseen domains have novel identities and novel styles
    but the same attribute catalog.
    """
    params = params or GenParams()
    params.validate()
    rng = np.random.default_rng([int(seed), 0x5EED])
    catalog = AttributeCatalog.build(rng, params)
    next_id = 0
    train, seen_tests, unseen_tests = [], [], []
    for t in range(1, params.domains + 1):
        style = _unit(rng, params.dim) * params.style_norm
        clutter = _unit(rng, params.dim) * params.clutter_norm
        train_ids = _make_identities(rng, catalog, params.ids_per_domain, next_id, params.latent_norm)
        next_id += params.ids_per_domain
        test_ids = _make_identities(rng, catalog, params.test_ids_per_domain, next_id, params.latent_norm)
        next_id += params.test_ids_per_domain
        train.append(render_domain(catalog, train_ids, params, style, clutter, rng, t, "train"))
        seen_tests.append(render_domain(catalog, test_ids, params, style, clutter, rng, t, "test"))
    for u in range(1, params.unseen_domains + 1):
        style = _unit(rng, params.dim) * params.style_norm
        clutter = _unit(rng, params.dim) * params.clutter_norm
        ids = _make_identities(rng, catalog, params.test_ids_per_domain, next_id, params.latent_norm)
        next_id += params.test_ids_per_domain
        unseen_tests.append(
            render_domain(catalog, ids, params, style, clutter, rng, params.domains + u, "unseen")
        )
    return StreamBundle(train, seen_tests, unseen_tests, catalog, params)


def attribute_oracle(instance: InstanceRecord, attribute: int) -> np.ndarray:
    """Ground-truth text embedding of ``instance``'s value for ``attribute``.

    Stands in for an image-to-text description pipeline: the true categorical
    value is known, so the lookup returns its text codebook vector directly.
    """
    if instance.text_attr is None or attribute >= instance.text_attr.shape[0]:
        raise IndexError(f"attribute index {attribute} out of range")
    return instance.text_attr[attribute]


# ---------------------------------------------------------------------------
# batch sampling


def sample_pk_batch(dataset: DomainDataset, p: int, k: int, rng: np.random.Generator):
    """One batch of ``p`` identities x ``k`` instances, drawn fresh."""
    sampler = PKEpochSampler(dataset, p, k, rng)
    return dataset.fetch(next(iter(sampler)))


class PKEpochSampler:
    """Yields index batches of P identities x K instances per epoch pass.

    Within one pass every instance appears at most once; identities drop out
    once they cannot fill another K-block, and the pass ends when fewer than
    P identities remain eligible.
    """

    def __init__(self, dataset: DomainDataset, p: int, k: int, rng: np.random.Generator):
        if p < 2:
            raise SamplingError("need at least 2 identities per batch")
        if k < 1:
            raise SamplingError("need at least 1 instance per identity")
        groups = dataset.indices_by_identity()
        eligible = {y: idx for y, idx in groups.items() if len(idx) >= k}
        if len(eligible) < p:
            raise SamplingError(
                f"dataset has {len(eligible)} identities with >= {k} instances, need {p}"
            )
        self.dataset = dataset
        self.p = p
        self.k = k
        self.rng = rng
        self.groups = groups

    def __iter__(self):
        pools = {}
        for y, idx in self.groups.items():
            order = np.array(idx)
            self.rng.shuffle(order)
            pools[y] = list(order)
        while True:
            ready = [y for y, pool in pools.items() if len(pool) >= self.k]
            if len(ready) < self.p:
                return
            chosen = self.rng.choice(len(ready), size=self.p, replace=False)
            batch = []
            for ci in chosen:
                y = ready[ci]
                for _ in range(self.k):
                    batch.append(pools[y].pop())
            yield np.array(batch)


# ---------------------------------------------------------------------------
# embedding-file export / ingestion


def _write_block_file(path, magic: bytes, array: np.ndarray):
    n, rows, d = array.shape
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<IIII", FILE_VERSION, n, rows, d))
        fh.write(array.astype("<f4").tobytes())


def write_token_file(path, tokens: np.ndarray):
    """Tokens (n, L_h, d) -> magic VLTK, version, counts, float32 LE payload."""
    _write_block_file(path, TOKEN_MAGIC, tokens)


def write_attribute_file(path, attrs: np.ndarray):
    """Attribute embeddings (n, N_a, d) -> magic VLTA header + float32 payload."""
    _write_block_file(path, ATTR_MAGIC, attrs)


def write_label_file(path, records):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LABEL_HEADER)
        for r in records:
            writer.writerow([r.item_id, r.identity, r.camera, r.domain])


def export_domain(dataset: DomainDataset, out_dir, stem: str = "domain"):
    """Write one dataset as token/attribute/label files; returns the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = dataset.all()
    tokens = np.stack([r.tokens for r in records])
    attrs = np.stack([r.text_attr for r in records])
    token_path = out_dir / f"{stem}.vltk"
    attr_path = out_dir / f"{stem}.vlta"
    label_path = out_dir / f"{stem}.csv"
    write_token_file(token_path, tokens)
    write_attribute_file(attr_path, attrs)
    write_label_file(label_path, records)
    return token_path, attr_path, label_path


def _read_block_file(path, magic: bytes) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(20)
        if len(head) < 20:
            raise IngestError(f"{path}: truncated header at byte offset {len(head)}")
        if head[:4] != magic:
            raise IngestError(f"{path}: bad magic {head[:4]!r}, expected {magic!r}")
        version, n, rows, d = struct.unpack("<IIII", head[4:20])
        if version != FILE_VERSION:
            raise IngestError(f"{path}: unsupported version {version}")
        expect = n * rows * d * 4
        payload = fh.read(expect + 1)
        if len(payload) < expect:
            raise IngestError(
                f"{path}: truncated payload at byte offset {20 + len(payload)}, expected {expect} bytes"
            )
        if len(payload) > expect:
            raise IngestError(f"{path}: trailing bytes after offset {20 + expect}")
    data = np.frombuffer(payload[:expect], dtype="<f4").reshape(n, rows, d)
    bad = ~np.isfinite(data)
    if bad.any():
        flat = int(np.flatnonzero(bad)[0])
        raise IngestError(f"{path}: non-finite value at element {flat} (byte offset {20 + flat * 4})")
    return data.astype(np.float64)


def read_token_file(path) -> np.ndarray:
    return _read_block_file(path, TOKEN_MAGIC)


def read_attribute_file(path) -> np.ndarray:
    return _read_block_file(path, ATTR_MAGIC)


def read_label_file(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestError(f"{path}: empty label file") from None
        if header != LABEL_HEADER:
            raise IngestError(f"{path}: bad header {header}, expected {LABEL_HEADER}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise IngestError(f"{path}: line {lineno}: expected 4 fields, got {len(row)}")
            try:
                rows.append((row[0], int(row[1]), int(row[2]), int(row[3])))
            except ValueError:
                raise IngestError(f"{path}: line {lineno}: non-integer label field") from None
    return rows


def ingest_embeddings(token_path, attr_path, label_path) -> DomainDataset:
    """Assemble a dataset from precomputed embedding files.

    The three files must agree on the instance count and describe a single
    domain; ownership maps are unavailable for ingested data, so diagnostics
    that need them are unsupported on the result.
    """
    tokens = read_token_file(token_path)
    attrs = read_attribute_file(attr_path)
    labels = read_label_file(label_path)
    if tokens.shape[0] != attrs.shape[0]:
        raise IngestError(
            f"{token_path} has {tokens.shape[0]} items but {attr_path} has {attrs.shape[0]}"
        )
    if tokens.shape[2] != attrs.shape[2]:
        raise IngestError(
            f"{token_path} dim {tokens.shape[2]} disagrees with {attr_path} dim {attrs.shape[2]}"
        )
    if len(labels) != tokens.shape[0]:
        raise IngestError(
            f"{label_path} has {len(labels)} rows referencing {token_path} with "
            f"{tokens.shape[0]} items"
        )
    seen_ids = set()
    for item_id, _, _, _ in labels:
        if item_id in seen_ids:
            raise IngestError(f"{label_path}: duplicate item_id {item_id!r}")
        seen_ids.add(item_id)
    domains = {row[3] for row in labels}
    if len(domains) != 1:
        raise IngestError(f"{label_path}: expected a single domain, found {sorted(domains)}")
    domain_id = labels[0][3]
    instances = [
        InstanceRecord(
            item_id=item_id,
            tokens=tokens[i],
            identity=identity,
            camera=camera,
            domain=domain,
            ownership=None,
            text_attr=attrs[i],
        )
        for i, (item_id, identity, camera, domain) in enumerate(labels)
    ]
    return DomainDataset(domain_id, "test", instances)
