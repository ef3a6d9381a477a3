"""Scorer assembly: combines enabled components into one logistic output,
owns the flat parameter vector, the regularized objective and checkpoints.

All trainable parameters live in one float64 vector; each named piece
(embedding table, layer weights, combination weights, global bias) is a
reshaped view into it. The optimizer updates the flat vector in place,
finite differences perturb it directly, and the checkpoint writer dumps it
verbatim, so there is exactly one source of truth for parameter values.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import components as comp
from . import embedding as emb
from .data import EncodedBatch, EncodedDataset, Instance, Schema, encode_instances
from .errors import CheckpointError, ConfigError, DimensionError
from .numerics import Rng

PARTS = ("linear", "fm", "dnn", "cin", "cross")

PRESETS = {
    "lr": ("linear",),
    "fm": ("linear", "fm"),
    "dnn": ("dnn",),
    "crossnet": ("cross",),
    "cin": ("cin",),
    "deepfm": ("linear", "fm", "dnn"),
    "xdeepfm": ("linear", "cin", "dnn"),
}

PRED_CLAMP = 1e-12


@dataclass(frozen=True)
class DnnConfig:
    widths: tuple[int, ...] = (400,)
    activation: str = "relu"


@dataclass(frozen=True)
class CinConfig:
    widths: tuple[int, ...] = (100,)
    activation: str = "identity"
    rank: int = 0  # 0 = dense filters, >0 = factored filters of that rank


@dataclass(frozen=True)
class CrossConfig:
    depth: int = 3


@dataclass(frozen=True)
class ModelSpec:
    parts: frozenset[str]
    embedding_dim: int = 10
    dnn: DnnConfig = field(default_factory=DnnConfig)
    cin: CinConfig = field(default_factory=CinConfig)
    cross: CrossConfig = field(default_factory=CrossConfig)
    fm_weight_trainable: bool = True

    def __post_init__(self):
        if not self.parts:
            raise ConfigError("a model needs at least one enabled part")
        unknown = self.parts - set(PARTS)
        if unknown:
            raise ConfigError(f"unknown parts {sorted(unknown)}; choose from {PARTS}")
        if self.embedding_dim < 1:
            raise ConfigError("embedding_dim must be >= 1")
        if "dnn" in self.parts:
            if not self.dnn.widths or any(w < 1 for w in self.dnn.widths):
                raise ConfigError(f"bad dnn widths {self.dnn.widths}")
            if self.dnn.activation not in comp.ACTIVATIONS:
                raise ConfigError(f"bad dnn activation {self.dnn.activation!r}")
        if "cin" in self.parts:
            if not self.cin.widths or any(w < 1 for w in self.cin.widths):
                raise ConfigError(f"bad cin widths {self.cin.widths}")
            if self.cin.activation not in comp.ACTIVATIONS:
                raise ConfigError(f"bad cin activation {self.cin.activation!r}")
            if self.cin.rank < 0:
                raise ConfigError("cin rank must be >= 0")
        if "cross" in self.parts and self.cross.depth < 1:
            raise ConfigError("cross depth must be >= 1")

    @property
    def needs_embedding(self) -> bool:
        return bool(self.parts & {"fm", "dnn", "cin", "cross"})


def preset(name: str, **overrides) -> ModelSpec:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return ModelSpec(parts=frozenset(PRESETS[name]), **overrides)


def build_layout(
    spec: ModelSpec, n_features: int, field_count: int
) -> list[tuple[str, tuple[int, ...]]]:
    """Named parameter pieces in their fixed flat-vector order."""
    m, d = field_count, spec.embedding_dim
    layout: list[tuple[str, tuple[int, ...]]] = []
    if spec.needs_embedding:
        layout.append(("embedding", (n_features, d)))
    if "linear" in spec.parts:
        layout.append(("linear.w", (n_features,)))
    if "dnn" in spec.parts:
        prev = m * d
        for k, width in enumerate(spec.dnn.widths):
            layout.append((f"dnn.W{k}", (width, prev)))
            layout.append((f"dnn.b{k}", (width,)))
            prev = width
        layout.append(("dnn.out_w", (prev,)))
    if "cin" in spec.parts:
        prev = m
        for k, width in enumerate(spec.cin.widths):
            if spec.cin.rank > 0:
                layout.append((f"cin.U{k}", (width, prev, spec.cin.rank)))
                layout.append((f"cin.V{k}", (width, m, spec.cin.rank)))
            else:
                layout.append((f"cin.W{k}", (width, prev, m)))
            prev = width
        layout.append(("cin.out_w", (sum(spec.cin.widths),)))
    if "cross" in spec.parts:
        for k in range(spec.cross.depth):
            layout.append((f"cross.w{k}", (m * d,)))
            layout.append((f"cross.b{k}", (m * d,)))
        layout.append(("cross.out_w", (m * d,)))
    if "fm" in spec.parts:
        layout.append(("fm.weight", (1,)))
    layout.append(("bias", (1,)))
    return layout


def _is_bias(name: str) -> bool:
    return name == "bias" or ".b" in name


class ModelParams:
    """Flat parameter vector plus named views into it."""

    def __init__(
        self,
        spec: ModelSpec,
        n_features: int,
        field_count: int,
        seed: int = 0,
        flat: np.ndarray | None = None,
    ):
        self.spec = spec
        self.n_features = n_features
        self.field_count = field_count
        self.seed = seed
        self.layout = build_layout(spec, n_features, field_count)
        self.slices: dict[str, slice] = {}
        self.shapes: dict[str, tuple[int, ...]] = {}
        offset = 0
        for name, shape in self.layout:
            size = int(np.prod(shape))
            self.slices[name] = slice(offset, offset + size)
            self.shapes[name] = shape
            offset += size
        self.size = offset
        if flat is None:
            flat = np.zeros(offset, dtype=np.float64)
        if flat.shape != (offset,):
            raise DimensionError(
                f"flat vector has {flat.shape[0]} entries, layout wants {offset}"
            )
        self.flat = flat

    def view(self, name: str) -> np.ndarray:
        return self.view_in(self.flat, name)

    def view_in(self, buffer: np.ndarray, name: str) -> np.ndarray:
        return buffer[self.slices[name]].reshape(self.shapes[name])

    def has(self, name: str) -> bool:
        return name in self.slices

    def clone(self) -> "ModelParams":
        return ModelParams(
            self.spec,
            self.n_features,
            self.field_count,
            seed=self.seed,
            flat=self.flat.copy(),
        )

    def names(self) -> list[str]:
        return [name for name, _ in self.layout]


def init_params(
    spec: ModelSpec, n_features: int, field_count: int, seed: int
) -> ModelParams:
    """Gaussian(std 0.01) weights, zero biases, unit FM combination weight."""
    params = ModelParams(spec, n_features, field_count, seed=seed)
    rng = Rng(seed)
    for name, _ in params.layout:
        target = params.view(name)
        if name == "fm.weight":
            target[...] = 1.0
        elif not _is_bias(name):
            target[...] = rng.normals(target.size, std=0.01).reshape(target.shape)
    return params


# ---------------------------------------------------------------------------
# Forward / backward over encoded batches.


def forward_batch(params: ModelParams, batch: EncodedBatch) -> tuple[np.ndarray, dict]:
    spec = params.spec
    b = batch.size
    z = np.full(b, float(params.view("bias")[0]), dtype=np.float64)
    cache: dict = {}

    if "linear" in spec.parts:
        z += comp.linear_batch(params.view("linear.w"), batch)

    if spec.needs_embedding:
        x0 = emb.embed_batch(params.view("embedding"), batch)
        cache["x0"] = x0

    if "fm" in spec.parts:
        fm_vals = comp.fm_pairwise_batch(x0)
        cache["fm"] = fm_vals
        z += float(params.view("fm.weight")[0]) * fm_vals

    if "dnn" in spec.parts:
        flat_in = x0.reshape(b, -1)
        ws = [params.view(f"dnn.W{k}") for k in range(len(spec.dnn.widths))]
        bs = [params.view(f"dnn.b{k}") for k in range(len(spec.dnn.widths))]
        h, dnn_cache = comp.dnn_batch_forward(flat_in, ws, bs, spec.dnn.activation)
        cache["dnn"] = (dnn_cache, h)
        z += h @ params.view("dnn.out_w")

    if "cin" in spec.parts:
        if spec.cin.rank > 0:
            filters = [
                comp.materialize_filter_block(
                    params.view(f"cin.U{k}"), params.view(f"cin.V{k}")
                )
                for k in range(len(spec.cin.widths))
            ]
        else:
            filters = [params.view(f"cin.W{k}") for k in range(len(spec.cin.widths))]
        pooled, _, cin_cache = comp.cin_batch_forward(x0, filters, spec.cin.activation)
        cache["cin"] = (cin_cache, pooled, filters)
        z += pooled @ params.view("cin.out_w")

    if "cross" in spec.parts:
        flat_in = x0.reshape(b, -1)
        ws = [params.view(f"cross.w{k}") for k in range(spec.cross.depth)]
        bs = [params.view(f"cross.b{k}") for k in range(spec.cross.depth)]
        out, cross_cache = comp.crossnet_batch_forward(flat_in, ws, bs)
        cache["cross"] = (cross_cache, out, flat_in)
        z += out @ params.view("cross.out_w")

    cache["z"] = z
    return comp.stable_sigmoid(z), cache


def backward_batch(
    params: ModelParams, batch: EncodedBatch, cache: dict, grad_z: np.ndarray
) -> np.ndarray:
    """Gradient of sum_b grad_z[b] * z[b] w.r.t. the flat parameter vector."""
    spec = params.spec
    grads = np.zeros_like(params.flat)
    g = np.asarray(grad_z, dtype=np.float64)

    params.view_in(grads, "bias")[0] = g.sum()

    if "linear" in spec.parts:
        params.view_in(grads, "linear.w")[...] = comp.linear_batch_backward(
            params.n_features, batch, g
        )

    if not spec.needs_embedding:
        return grads

    x0 = cache["x0"]
    grad_x0 = np.zeros_like(x0)
    b = batch.size

    if "fm" in spec.parts:
        w_fm = float(params.view("fm.weight")[0])
        grad_x0 += comp.fm_pairwise_batch_backward(x0, g * w_fm)
        # true derivative regardless of trainability; the trainer zeroes
        # frozen slices before the update step
        params.view_in(grads, "fm.weight")[0] = float(g @ cache["fm"])

    if "dnn" in spec.parts:
        dnn_cache, h = cache["dnn"]
        out_w = params.view("dnn.out_w")
        params.view_in(grads, "dnn.out_w")[...] = h.T @ g
        ws = [params.view(f"dnn.W{k}") for k in range(len(spec.dnn.widths))]
        gw, gb, g_in = comp.dnn_batch_backward(
            dnn_cache, ws, spec.dnn.activation, g[:, None] * out_w[None, :]
        )
        for k in range(len(spec.dnn.widths)):
            params.view_in(grads, f"dnn.W{k}")[...] = gw[k]
            params.view_in(grads, f"dnn.b{k}")[...] = gb[k]
        grad_x0 += g_in.reshape(x0.shape)

    if "cin" in spec.parts:
        cin_cache, pooled, filters = cache["cin"]
        out_w = params.view("cin.out_w")
        params.view_in(grads, "cin.out_w")[...] = pooled.T @ g
        gf, g_x0 = comp.cin_batch_backward(
            x0, filters, cin_cache, spec.cin.activation, g[:, None] * out_w[None, :]
        )
        for k in range(len(spec.cin.widths)):
            if spec.cin.rank > 0:
                gu, gv = comp.lowrank_block_backward(
                    params.view(f"cin.U{k}"), params.view(f"cin.V{k}"), gf[k]
                )
                params.view_in(grads, f"cin.U{k}")[...] = gu
                params.view_in(grads, f"cin.V{k}")[...] = gv
            else:
                params.view_in(grads, f"cin.W{k}")[...] = gf[k]
        grad_x0 += g_x0

    if "cross" in spec.parts:
        cross_cache, out, flat_in = cache["cross"]
        out_w = params.view("cross.out_w")
        params.view_in(grads, "cross.out_w")[...] = out.T @ g
        ws = [params.view(f"cross.w{k}") for k in range(spec.cross.depth)]
        gw, gb, g_in = comp.crossnet_batch_backward(
            flat_in, cross_cache, ws, g[:, None] * out_w[None, :]
        )
        for k in range(spec.cross.depth):
            params.view_in(grads, f"cross.w{k}")[...] = gw[k]
            params.view_in(grads, f"cross.b{k}")[...] = gb[k]
        grad_x0 += g_in.reshape(x0.shape)

    params.view_in(grads, "embedding")[...] = emb.embed_batch_backward(
        params.n_features, batch, grad_x0
    )
    return grads


def predict_batch(params: ModelParams, batch: EncodedBatch) -> np.ndarray:
    return forward_batch(params, batch)[0]


def forward(instance: Instance, params: ModelParams, schema: Schema) -> float:
    """Score one instance; same math as the batched path."""
    return float(predict_batch(params, encode_instances([instance], schema))[0])


def score_dataset(
    params: ModelParams, enc: EncodedDataset, chunk: int = 8192
) -> np.ndarray:
    scores = np.empty(enc.n, dtype=np.float64)
    for start in range(0, enc.n, chunk):
        idx = np.arange(start, min(start + chunk, enc.n))
        scores[idx] = predict_batch(params, enc.batch(idx))
    return scores


# ---------------------------------------------------------------------------
# Loss and regularized objective.


def clamp_predictions(preds: np.ndarray) -> np.ndarray:
    return np.clip(preds, PRED_CLAMP, 1.0 - PRED_CLAMP)


def logloss(preds: np.ndarray, labels: np.ndarray) -> float:
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if preds.size == 0 or preds.shape != labels.shape:
        raise ValueError(
            f"need matching non-empty arrays, got {preds.shape} and {labels.shape}"
        )
    p = clamp_predictions(preds)
    return float(-np.mean(labels * np.log(p) + (1.0 - labels) * np.log(1.0 - p)))


def regularized_names(params: ModelParams) -> list[str]:
    """Everything in the penalty: linear, layer weights, combination weights.

    Embedding entries and all additive biases stay out of the penalty. A
    frozen FM weight still appears here (a constant term); the trainer
    zeroes its gradient slice, so freezing never changes other updates.
    """
    return [
        name
        for name, _ in params.layout
        if name != "embedding" and not _is_bias(name)
    ]


def regularization(params: ModelParams) -> float:
    """Squared L2 norm over the regularized parameter set."""
    return float(
        sum(float(np.sum(params.view(n) ** 2)) for n in regularized_names(params))
    )


def objective(loss: float, params: ModelParams, lam: float) -> float:
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    return float(loss) + lam * regularization(params)


def add_regularization_gradient(
    params: ModelParams, grads: np.ndarray, scale: float
) -> None:
    """grads += scale * d/dtheta (squared L2 over the regularized set)."""
    for name in regularized_names(params):
        sl = params.slices[name]
        grads[sl] += scale * 2.0 * params.flat[sl]


# ---------------------------------------------------------------------------
# Per-bucket parameter counts, enumerated from the actual layout.


CENSUS_KEYS = (
    "embedding",
    "linear",
    "dnn",
    "dnn_biases",
    "cin_filters",
    "cin_output",
    "cross",
    "cross_biases",
    "fm",
    "bias",
)


def _bucket_of(name: str) -> str:
    if name == "embedding":
        return "embedding"
    if name == "linear.w":
        return "linear"
    if name.startswith("dnn.b"):
        return "dnn_biases"
    if name.startswith("dnn."):
        return "dnn"
    if name == "cin.out_w":
        return "cin_output"
    if name.startswith("cin."):
        return "cin_filters"
    if name.startswith("cross.b"):
        return "cross_biases"
    if name.startswith("cross."):
        return "cross"
    if name == "fm.weight":
        return "fm"
    if name == "bias":
        return "bias"
    raise ConfigError(f"unbucketed parameter name {name!r}")


def param_census(spec: ModelSpec, n_features: int, field_count: int) -> dict[str, int]:
    """Counts per bucket, summed from allocated array shapes."""
    census = {key: 0 for key in CENSUS_KEYS}
    for name, shape in build_layout(spec, n_features, field_count):
        census[_bucket_of(name)] += int(np.prod(shape))
    census["total"] = sum(census[key] for key in CENSUS_KEYS)
    return census


# ---------------------------------------------------------------------------
# Checkpoints: magic, text header, blank line, little-endian float64 block.


CKPT_MAGIC = b"XFM1\n"


def _spec_header(params: ModelParams) -> dict[str, str]:
    spec = params.spec
    return {
        "format_version": "1",
        "parts": ",".join(sorted(spec.parts)),
        "embedding_dim": str(spec.embedding_dim),
        "field_count": str(params.field_count),
        "n_features": str(params.n_features),
        "dnn_widths": ",".join(str(w) for w in spec.dnn.widths),
        "dnn_activation": spec.dnn.activation,
        "cin_widths": ",".join(str(w) for w in spec.cin.widths),
        "cin_activation": spec.cin.activation,
        "cin_rank": str(spec.cin.rank),
        "cross_depth": str(spec.cross.depth),
        "fm_weight_trainable": "true" if spec.fm_weight_trainable else "false",
        "seed": str(params.seed),
        "n_params": str(params.size),
    }


def save_checkpoint(params: ModelParams, path) -> None:
    header = _spec_header(params)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        for key, value in header.items():
            fh.write(f"{key} = {value}\n".encode("ascii"))
        fh.write(b"\n")
        fh.write(np.ascontiguousarray(params.flat, dtype="<f8").tobytes())


def _parse_widths(raw: str) -> tuple[int, ...]:
    return tuple(int(x) for x in raw.split(",") if x != "")


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(CKPT_MAGIC):
        raise CheckpointError(f"{path}: bad magic bytes")
    sep = blob.find(b"\n\n", len(CKPT_MAGIC) - 1)
    if sep < 0:
        raise CheckpointError(f"{path}: missing header terminator")
    header_text = blob[len(CKPT_MAGIC) : sep].decode("ascii", errors="replace")
    payload = blob[sep + 2 :]
    kv: dict[str, str] = {}
    for line in header_text.splitlines():
        if "=" not in line:
            raise CheckpointError(f"{path}: malformed header line {line!r}")
        key, value = line.split("=", 1)
        kv[key.strip()] = value.strip()
    try:
        if kv["format_version"] != "1":
            raise CheckpointError(
                f"{path}: unsupported format_version {kv['format_version']!r}"
            )
        spec = ModelSpec(
            parts=frozenset(p for p in kv["parts"].split(",") if p),
            embedding_dim=int(kv["embedding_dim"]),
            dnn=DnnConfig(_parse_widths(kv["dnn_widths"]), kv["dnn_activation"]),
            cin=CinConfig(
                _parse_widths(kv["cin_widths"]),
                kv["cin_activation"],
                int(kv["cin_rank"]),
            ),
            cross=CrossConfig(int(kv["cross_depth"])),
            fm_weight_trainable=kv["fm_weight_trainable"] == "true",
        )
        n_features = int(kv["n_features"])
        field_count = int(kv["field_count"])
        seed = int(kv["seed"])
        n_params = int(kv["n_params"])
    except KeyError as exc:
        raise CheckpointError(f"{path}: header missing key {exc}") from exc
    except (ValueError, ConfigError) as exc:
        raise CheckpointError(f"{path}: invalid header ({exc})") from exc
    if len(payload) != 8 * n_params:
        raise CheckpointError(
            f"{path}: expected {8 * n_params} payload bytes, found {len(payload)}"
        )
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    params = ModelParams(spec, n_features, field_count, seed=seed, flat=flat)
    if params.size != n_params:
        raise CheckpointError(
            f"{path}: header count {n_params} disagrees with layout {params.size}"
        )
    return params


def spec_to_config(spec: ModelSpec) -> dict[str, str]:
    """ModelSpec as flat config pairs (the CLI's model.* section)."""
    return {
        "model.parts": ",".join(sorted(spec.parts)),
        "model.embedding_dim": str(spec.embedding_dim),
        "model.dnn_widths": ",".join(str(w) for w in spec.dnn.widths),
        "model.dnn_activation": spec.dnn.activation,
        "model.cin_widths": ",".join(str(w) for w in spec.cin.widths),
        "model.cin_activation": spec.cin.activation,
        "model.cin_rank": str(spec.cin.rank),
        "model.cross_depth": str(spec.cross.depth),
        "model.fm_weight_trainable": "true" if spec.fm_weight_trainable else "false",
    }


def spec_from_config(kv: dict[str, str]) -> ModelSpec:
    """Build a ModelSpec from model.* keys; model.preset seeds the parts."""
    base = preset(kv.get("model.preset", "xdeepfm"))
    parts = base.parts
    if "model.parts" in kv:
        parts = frozenset(p.strip() for p in kv["model.parts"].split(",") if p.strip())
    try:
        return ModelSpec(
            parts=parts,
            embedding_dim=int(kv.get("model.embedding_dim", "10")),
            dnn=DnnConfig(
                _parse_widths(kv.get("model.dnn_widths", "400")) or (400,),
                kv.get("model.dnn_activation", "relu"),
            ),
            cin=CinConfig(
                _parse_widths(kv.get("model.cin_widths", "100")) or (100,),
                kv.get("model.cin_activation", "identity"),
                int(kv.get("model.cin_rank", "0")),
            ),
            cross=CrossConfig(int(kv.get("model.cross_depth", "3"))),
            fm_weight_trainable=kv.get("model.fm_weight_trainable", "true") == "true",
        )
    except ValueError as exc:
        raise ConfigError(f"bad model configuration: {exc}") from exc


def replace_spec(spec: ModelSpec, **changes) -> ModelSpec:
    return dataclasses.replace(spec, **changes)
