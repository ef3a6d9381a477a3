"""Multi-field categorical datasets.

An instance activates one feature (univalent field) or any number of
features (multivalent field) in each field. Datasets live in UTF-8 CSV with
a header row: one ``label`` column holding 0/1 plus one column per declared
field; multivalent cells pack several feature tokens with ``|`` between
them, and an empty multivalent cell means no active features.

Feature ids are global, contiguous and 0-based. Each field additionally
owns one reserved out-of-vocabulary id; tokens unseen at vocabulary-build
time map to it.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import ConfigError, DataError, ParseError
from .numerics import Rng

ARITIES = ("uni", "multi")


def parse_kv(text: str) -> dict[str, str]:
    """Parse flat ``key = value`` text; '#' starts a comment line."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def format_kv(pairs: dict[str, str]) -> str:
    return "".join(f"{k} = {v}\n" for k, v in pairs.items())


@dataclass(frozen=True)
class FieldDef:
    """Declared field: a name and an arity ('uni' or 'multi')."""

    name: str
    arity: str

    def __post_init__(self):
        if self.arity not in ARITIES:
            raise ConfigError(
                f"field {self.name!r}: arity must be one of {ARITIES}, "
                f"got {self.arity!r}"
            )


class Schema:
    """Field declarations plus the global feature vocabulary.

    ``vocab[f]`` maps a field's feature tokens to global ids; ``oov_ids[f]``
    is the field's reserved id for unseen tokens. Ids cover
    ``range(n_features)`` exactly.
    """

    def __init__(
        self,
        fields: Sequence[FieldDef],
        vocab: Sequence[dict[str, int]],
        oov_ids: Sequence[int],
        label_column: str = "label",
    ):
        self.fields = tuple(fields)
        self.vocab = tuple(dict(v) for v in vocab)
        self.oov_ids = tuple(oov_ids)
        self.label_column = label_column
        if len(self.fields) < 2:
            raise ConfigError("a schema needs at least 2 fields")
        if len(self.vocab) != len(self.fields) or len(self.oov_ids) != len(self.fields):
            raise ConfigError("schema: vocab/oov lists must match field count")
        ids = [fid for v in self.vocab for fid in v.values()] + list(self.oov_ids)
        if sorted(ids) != list(range(len(ids))):
            raise ConfigError("schema: feature ids must be unique and contiguous")
        for fdef, v in zip(self.fields, self.vocab):
            if not v:
                raise ConfigError(f"field {fdef.name!r} has an empty vocabulary")
        self.n_features = len(ids)
        self._token_of: dict[int, str] | None = None

    @property
    def field_count(self) -> int:
        return len(self.fields)

    def field_index(self, name: str) -> int:
        for i, fdef in enumerate(self.fields):
            if fdef.name == name:
                return i
        raise ConfigError(f"unknown field {name!r}")

    def lookup(self, field: int, token: str) -> int:
        """Token to id; unseen tokens map to the field's OOV id."""
        return self.vocab[field].get(token, self.oov_ids[field])

    def feature_token(self, fid: int) -> str:
        if self._token_of is None:
            rev = {}
            for f, v in enumerate(self.vocab):
                rev.update({i: tok for tok, i in v.items()})
            self._token_of = rev
        return self._token_of[fid]

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Schema)
            and self.fields == other.fields
            and self.vocab == other.vocab
            and self.oov_ids == other.oov_ids
            and self.label_column == other.label_column
        )


@dataclass(frozen=True)
class Instance:
    """One labelled example: active feature ids per field, in cell order."""

    label: int
    features: tuple[tuple[int, ...], ...]


@dataclass
class Dataset:
    schema: Schema
    instances: list[Instance]

    def __len__(self) -> int:
        return len(self.instances)

    def labels(self) -> np.ndarray:
        return np.array([inst.label for inst in self.instances], dtype=np.float64)


def load_schema_config(text: str) -> tuple[list[FieldDef], str]:
    """Read field declarations from flat key = value text.

    Keys: ``field.<n>.name``, ``field.<n>.arity`` for n = 0,1,... and
    ``label_column`` (defaults to 'label').
    """
    kv = parse_kv(text)
    label_column = kv.pop("label_column", "label")
    fields: list[FieldDef] = []
    n = 0
    while f"field.{n}.name" in kv:
        name = kv.pop(f"field.{n}.name")
        arity = kv.pop(f"field.{n}.arity", "uni")
        fields.append(FieldDef(name, arity))
        n += 1
    leftovers = [k for k in kv if k.startswith("field.")]
    if leftovers:
        raise ConfigError(
            f"schema config: field declarations must be consecutive from 0; "
            f"unmatched keys {leftovers}"
        )
    if len(fields) < 2:
        raise ConfigError("schema config declares fewer than 2 fields")
    return fields, label_column


def format_schema_config(fields: Sequence[FieldDef], label_column: str = "label") -> str:
    pairs = {"label_column": label_column}
    for i, fdef in enumerate(fields):
        pairs[f"field.{i}.name"] = fdef.name
        pairs[f"field.{i}.arity"] = fdef.arity
    return format_kv(pairs)


def schema_to_json(schema: Schema) -> dict:
    """JSON-ready snapshot of a fitted schema, token-to-id maps included.

    Checkpoints store only dense parameters, so scoring a new file needs
    this alongside the checkpoint to reproduce the id assignment.
    """
    return {
        "label_column": schema.label_column,
        "fields": [{"name": f.name, "arity": f.arity} for f in schema.fields],
        "vocab": [dict(v) for v in schema.vocab],
        "oov_ids": list(schema.oov_ids),
    }


def schema_from_json(payload: dict) -> Schema:
    try:
        fields = [FieldDef(f["name"], f["arity"]) for f in payload["fields"]]
        return Schema(
            fields,
            [dict(v) for v in payload["vocab"]],
            payload["oov_ids"],
            payload.get("label_column", "label"),
        )
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed schema snapshot: {exc}") from exc


def parse_dataset(
    source: Iterable[str],
    fields: Sequence[FieldDef],
    label_column: str = "label",
    schema: Schema | None = None,
) -> Dataset:
    """Parse CSV rows into a Dataset.

    With ``schema=None`` the vocabulary is built during the pass: tokens get
    ids in order of first appearance, and one OOV id per field is appended
    at the tail. With an existing schema (eval files), tokens are looked up
    and unseen ones fall back to the field's OOV id.
    """
    reader = csv.reader(source)
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError("empty input: missing header row", line=1)
    header = [h.strip() for h in header]
    if label_column not in header:
        raise ParseError(f"header has no {label_column!r} column", line=1)
    declared = {f.name: i for i, f in enumerate(fields)}
    if len(declared) != len(fields):
        raise ConfigError("duplicate field names in schema config")
    col_to_field: list[int | None] = []
    seen = set()
    for col in header:
        if col == label_column:
            col_to_field.append(None)
            continue
        if col not in declared:
            raise ConfigError(f"column {col!r} is not declared in the schema config")
        col_to_field.append(declared[col])
        seen.add(col)
    missing = set(declared) - seen
    if missing:
        raise ConfigError(f"declared fields missing from header: {sorted(missing)}")
    label_col = header.index(label_column)

    building = schema is None
    if building:
        vocab: list[dict[str, int]] = [dict() for _ in fields]
        next_id = 0

    instances: list[Instance] = []
    for row in reader:
        lineno = reader.line_num
        if len(row) != len(header):
            raise ParseError(
                f"expected {len(header)} columns, got {len(row)}", line=lineno
            )
        raw_label = row[label_col].strip()
        if raw_label not in ("0", "1"):
            raise ParseError(f"label must be 0 or 1, got {raw_label!r}", line=lineno)
        per_field: list[tuple[int, ...]] = [() for _ in fields]
        for col, cell in enumerate(row):
            f = col_to_field[col]
            if f is None:
                continue
            tokens = [t for t in cell.split("|") if t != ""] if cell != "" else []
            if fields[f].arity == "uni" and len(tokens) != 1:
                raise ParseError(
                    f"univalent field {fields[f].name!r} needs exactly one "
                    f"feature, got {len(tokens)}",
                    line=lineno,
                )
            ids = []
            for tok in tokens:
                if building:
                    if tok not in vocab[f]:
                        vocab[f][tok] = next_id
                        next_id += 1
                    ids.append(vocab[f][tok])
                else:
                    ids.append(schema.lookup(f, tok))
            per_field[f] = tuple(ids)
        instances.append(Instance(label=int(raw_label), features=tuple(per_field)))

    if building:
        for f, fdef in enumerate(fields):
            if not vocab[f]:
                # reserve one placeholder so every field has a vocabulary entry
                vocab[f][f"<empty:{fdef.name}>"] = next_id
                next_id += 1
        oov_ids = list(range(next_id, next_id + len(fields)))
        schema = Schema(fields, vocab, oov_ids, label_column=label_column)
    return Dataset(schema=schema, instances=instances)


def serialize_dataset(dataset: Dataset, stream: io.TextIOBase) -> None:
    """Write a Dataset back to CSV (header = label column + field names)."""
    schema = dataset.schema
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow([schema.label_column] + [f.name for f in schema.fields])
    for inst in dataset.instances:
        cells = [str(inst.label)]
        for ids in inst.features:
            cells.append("|".join(schema.feature_token(fid) for fid in ids))
        writer.writerow(cells)


def split(
    dataset: Dataset, ratios: tuple[float, float, float], seed: int
) -> tuple[Dataset, Dataset, Dataset]:
    """Random train/valid/test partition with deterministic permutation.

    Sizes are floor(N*r) per part; leftover rows go to train. The three
    outputs are disjoint and cover the input exactly.
    """
    r = tuple(float(x) for x in ratios)
    if len(r) != 3 or any(x < 0 for x in r):
        raise DataError(f"ratios must be three non-negative numbers, got {ratios}")
    if abs(sum(r) - 1.0) > 1e-9:
        raise DataError(f"ratios must sum to 1, got {sum(r)}")
    n = len(dataset)
    if n < 3 and all(x > 0 for x in r):
        raise DataError(f"cannot split {n} instances three ways")
    n_train = int(math.floor(n * r[0]))
    n_valid = int(math.floor(n * r[1]))
    n_test = int(math.floor(n * r[2]))
    n_train += n - (n_train + n_valid + n_test)
    perm = Rng(seed).permutation(n)
    parts = (
        perm[:n_train],
        perm[n_train : n_train + n_valid],
        perm[n_train + n_valid :],
    )
    return tuple(
        Dataset(schema=dataset.schema, instances=[dataset.instances[i] for i in idx])
        for idx in parts
    )


def batches(
    dataset: Dataset, batch_size: int, shuffle: bool, seed: int
) -> Iterator[list[Instance]]:
    """Mini-batch iterator: every instance exactly once, last batch short."""
    if batch_size < 1:
        raise DataError("batch_size must be >= 1")
    n = len(dataset)
    order = Rng(seed).permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        yield [dataset.instances[i] for i in order[start : start + batch_size]]


# ---------------------------------------------------------------------------
# Vectorized encoding used by the trainer and evaluator.


@dataclass
class EncodedBatch:
    """Index arrays for one batch.

    ``fields[f]`` is ('uni', ids) with ids of shape (B,), or
    ('multi', rows, ids) where rows/ids are parallel arrays of the batch-row
    index and feature id of every active feature in field f.
    """

    labels: np.ndarray
    fields: list[tuple]
    size: int


class EncodedDataset:
    """Column-oriented copy of a Dataset for fast batched lookup."""

    def __init__(self, dataset: Dataset):
        schema = dataset.schema
        n = len(dataset)
        self.schema = schema
        self.n = n
        self.labels = dataset.labels()
        self._uni: dict[int, np.ndarray] = {}
        self._multi: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        for f, fdef in enumerate(schema.fields):
            if fdef.arity == "uni":
                self._uni[f] = np.fromiter(
                    (inst.features[f][0] for inst in dataset.instances),
                    dtype=np.int64,
                    count=n,
                )
            else:
                indptr = np.zeros(n + 1, dtype=np.int64)
                flat: list[int] = []
                for i, inst in enumerate(dataset.instances):
                    flat.extend(inst.features[f])
                    indptr[i + 1] = len(flat)
                self._multi[f] = (indptr, np.array(flat, dtype=np.int64))

    def batch(self, idx: np.ndarray) -> EncodedBatch:
        idx = np.asarray(idx, dtype=np.int64)
        fields: list[tuple] = []
        for f in range(self.schema.field_count):
            if f in self._uni:
                fields.append(("uni", self._uni[f][idx]))
            else:
                indptr, ids = self._multi[f]
                counts = indptr[idx + 1] - indptr[idx]
                total = int(counts.sum())
                rows = np.repeat(np.arange(idx.size), counts)
                starts = indptr[idx]
                shift = np.concatenate(([0], np.cumsum(counts)[:-1]))
                pos = np.repeat(starts - shift, counts) + np.arange(total)
                fields.append(("multi", rows, ids[pos]))
        return EncodedBatch(labels=self.labels[idx], fields=fields, size=idx.size)

    def full_batch(self) -> EncodedBatch:
        return self.batch(np.arange(self.n))


def encode_instances(instances: Sequence[Instance], schema: Schema) -> EncodedBatch:
    """Encode a list of instances directly (used by the per-instance API)."""
    return EncodedDataset(Dataset(schema=schema, instances=list(instances))).full_batch()


# ---------------------------------------------------------------------------
# Synthetic data generation.


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a synthetic multi-field categorical dataset.

    Every feature (field f, vocab slot v) owns a latent vector
    ``z[f, v] in R^latent_dim``. Each instance activates one uniformly drawn
    feature per field. Its raw score is

        score = sum over terms (fields, w):  w * sum_t prod_{f in fields} z[f, active_f][t]

    i.e. a generalized inner product across the term's fields. The label is
    ``1 iff score + eps > 0`` with ``eps ~ N(0, noise_std)``, so the exact
    label probability is ``Phi(score / noise_std)`` (standard normal CDF),
    degenerating to the deterministic indicator ``score > 0`` at
    noise_std = 0. Draw order from the seeded stream: latents
    (field-major, vocab-minor), then active features (instance-major,
    field-minor), then the noise values.
    """

    field_count: int
    vocab_per_field: int
    latent_dim: int
    interaction_terms: tuple[tuple[tuple[int, ...], float], ...]
    noise_std: float
    n_instances: int
    seed: int

    def __post_init__(self):
        if self.field_count < 2:
            raise DataError("field_count must be >= 2")
        if self.vocab_per_field < 1 or self.latent_dim < 1:
            raise DataError("vocab_per_field and latent_dim must be >= 1")
        if self.n_instances < 0:
            raise DataError("n_instances must be >= 0")
        if self.noise_std < 0:
            raise DataError("noise_std must be >= 0")
        for fields_tuple, _ in self.interaction_terms:
            if len(fields_tuple) not in (2, 3):
                raise DataError("interaction terms must reference 2 or 3 fields")
            if any(f < 0 or f >= self.field_count for f in fields_tuple):
                raise DataError(f"term {fields_tuple} references an unknown field")


def _synthetic_schema(spec: SyntheticSpec) -> Schema:
    m, v = spec.field_count, spec.vocab_per_field
    fields = [FieldDef(f"f{i}", "uni") for i in range(m)]
    vocab = [{f"v{j}": f * v + j for j in range(v)} for f in range(m)]
    oov_ids = [m * v + f for f in range(m)]
    return Schema(fields, vocab, oov_ids)


def synthetic_scores(
    spec: SyntheticSpec, latents: np.ndarray, choices: np.ndarray
) -> np.ndarray:
    """Recompute raw scores from latents and per-field active slots."""
    n = choices.shape[0]
    scores = np.zeros(n, dtype=np.float64)
    for fields_tuple, weight in spec.interaction_terms:
        prod = np.ones((n, spec.latent_dim), dtype=np.float64)
        for f in fields_tuple:
            prod *= latents[f, choices[:, f], :]
        scores += weight * prod.sum(axis=1)
    return scores


def label_probabilities(spec: SyntheticSpec, scores: np.ndarray) -> np.ndarray:
    """Exact P(label = 1) per instance under the documented recipe."""
    if spec.noise_std == 0.0:
        return (scores > 0).astype(np.float64)
    z = scores / (spec.noise_std * math.sqrt(2.0))
    return np.array([0.5 * (1.0 + math.erf(x)) for x in z])


def synthesize_full(spec: SyntheticSpec) -> tuple[Dataset, dict]:
    """Generate the dataset plus a manifest that lets oracles recompute it."""
    m, v, L = spec.field_count, spec.vocab_per_field, spec.latent_dim
    rng = Rng(spec.seed)
    latents = rng.normals(m * v * L).reshape(m, v, L)
    choices = rng.integers(spec.n_instances * m, v).reshape(spec.n_instances, m)
    noise = rng.normals(spec.n_instances, std=spec.noise_std)
    scores = synthetic_scores(spec, latents, choices)
    labels = (scores + noise > 0).astype(np.int64)

    schema = _synthetic_schema(spec)
    instances = [
        Instance(
            label=int(labels[i]),
            features=tuple((int(f * v + choices[i, f]),) for f in range(m)),
        )
        for i in range(spec.n_instances)
    ]
    manifest = {
        "spec": {
            "field_count": m,
            "vocab_per_field": v,
            "latent_dim": L,
            "interaction_terms": [
                {"fields": list(fs), "weight": w} for fs, w in spec.interaction_terms
            ],
            "noise_std": spec.noise_std,
            "n_instances": spec.n_instances,
            "seed": spec.seed,
        },
        "latents": latents.tolist(),
        "scores": scores.tolist(),
        "probabilities": label_probabilities(spec, scores).tolist(),
    }
    return Dataset(schema=schema, instances=instances), manifest


def synthesize(spec: SyntheticSpec) -> Dataset:
    """Pure function of its settings: equal settings, identical datasets."""
    return synthesize_full(spec)[0]


def load_synthetic_spec(text: str) -> SyntheticSpec:
    """Read a SyntheticSpec from flat key = value text.

    Keys: synth.fields, synth.vocab_per_field, synth.latent_dim,
    synth.noise_std, synth.n, synth.seed and synth.terms, a ';'-separated
    list of items like ``0*1*2:1.5`` (field indices joined by '*', then a
    colon and the weight).
    """
    kv = parse_kv(text)

    def need(key: str) -> str:
        if key not in kv:
            raise ConfigError(f"synthetic spec: missing key {key!r}")
        return kv[key]

    terms = []
    raw_terms = kv.get("synth.terms", "").strip()
    if raw_terms:
        for item in raw_terms.split(";"):
            item = item.strip()
            if not item:
                continue
            try:
                fields_part, weight_part = item.split(":")
                fields_tuple = tuple(int(x) for x in fields_part.split("*"))
                terms.append((fields_tuple, float(weight_part)))
            except ValueError as exc:
                raise ConfigError(f"synthetic spec: bad term {item!r}") from exc
    try:
        return SyntheticSpec(
            field_count=int(need("synth.fields")),
            vocab_per_field=int(need("synth.vocab_per_field")),
            latent_dim=int(need("synth.latent_dim")),
            interaction_terms=tuple(terms),
            noise_std=float(kv.get("synth.noise_std", "0.0")),
            n_instances=int(need("synth.n")),
            seed=int(kv.get("synth.seed", "0")),
        )
    except ValueError as exc:
        raise ConfigError(f"synthetic spec: {exc}") from exc


def format_synthetic_spec(spec: SyntheticSpec) -> str:
    terms = ";".join(
        "*".join(str(f) for f in fs) + f":{w!r}" for fs, w in spec.interaction_terms
    )
    return format_kv(
        {
            "synth.fields": str(spec.field_count),
            "synth.vocab_per_field": str(spec.vocab_per_field),
            "synth.latent_dim": str(spec.latent_dim),
            "synth.terms": terms,
            "synth.noise_std": repr(spec.noise_std),
            "synth.n": str(spec.n_instances),
            "synth.seed": str(spec.seed),
        }
    )
