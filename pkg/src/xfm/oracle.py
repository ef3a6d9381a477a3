"""Independent brute-force verifiers for the library's structural claims.

Each checker recomputes a property from first principles (symbolic
expansion, closed-form counting, explicit scalar recursion) without reusing
the code paths it is checking, and returns a JSON-ready report dict
{name, passed, worst_deviation, details}.
"""

from __future__ import annotations

import itertools

import numpy as np

from . import components as comp
from . import model as model_mod
from .errors import CapacityError, DimensionError
from .numerics import Rng, derive_seed, finite_diff_grad, relative_gradient_error

MONOMIAL_GUARD = 10**6

# A polynomial over the m embedding rows: multi-index (alpha_1..alpha_m)
# -> coefficient, meaning sum_alpha c * x_1^a1 o ... o x_m^am with
# elementwise powers and Hadamard products.
Poly = dict[tuple[int, ...], float]


def expand_cin(filters: list[np.ndarray], m: int) -> list[list[Poly]]:
    """Symbolic layer-by-layer expansion of the interaction stack.

    Returns, per layer, one polynomial per feature map. Row h of layer k is
    sum_{i,j} W_k[h,i,j] * (row i of layer k-1) o (embedding row j), so each
    step multiplies every existing monomial by one embedding row.
    """
    if filters and filters[0].shape[1] != m:
        raise DimensionError(
            f"first filter block expects {filters[0].shape[1]} rows, m={m}"
        )
    prev: list[Poly] = []
    for j in range(m):
        alpha = tuple(1 if f == j else 0 for f in range(m))
        prev.append({alpha: 1.0})
    layers: list[list[Poly]] = []
    stored = 0
    for w in filters:
        if w.shape[1] != len(prev) or w.shape[2] != m:
            raise DimensionError(
                f"filter block {w.shape} incompatible with ({len(prev)}, {m})"
            )
        current: list[Poly] = []
        for h in range(w.shape[0]):
            poly: Poly = {}
            for i in range(w.shape[1]):
                for alpha, c in prev[i].items():
                    for j in range(m):
                        coeff = float(w[h, i, j])
                        if coeff == 0.0:
                            continue
                        bumped = list(alpha)
                        bumped[j] += 1
                        key = tuple(bumped)
                        poly[key] = poly.get(key, 0.0) + c * coeff
            poly = {a: c for a, c in poly.items() if c != 0.0}
            stored += len(poly)
            if stored > MONOMIAL_GUARD:
                raise CapacityError(
                    f"expansion exceeds {MONOMIAL_GUARD} stored monomials"
                )
            current.append(poly)
        layers.append(current)
        prev = current
    return layers


def evaluate_polynomial(poly: Poly, x0: np.ndarray) -> np.ndarray:
    """Evaluate at concrete embedding rows; returns a length-D vector."""
    out = np.zeros(x0.shape[1], dtype=np.float64)
    for alpha, c in poly.items():
        term = np.full(x0.shape[1], c, dtype=np.float64)
        for f, power in enumerate(alpha):
            if power:
                term *= x0[f] ** power
        out += term
    return out


def permutation_coefficient(
    filters: list[np.ndarray], h: int, alpha: tuple[int, ...]
) -> float:
    """Direct coefficient of the monomial `alpha` in feature map h of the
    last layer: a chain contraction summed over the distinct orderings of
    the multi-index.

    An ordering B assigns which embedding row enters at which step: layer 1
    consumes (B1, B2), every later layer t consumes B_{t+1}, and the
    intermediate feature-map indices are contracted through the filters.
    """
    k = len(filters)
    degree = sum(alpha)
    if degree != k + 1:
        return 0.0
    symbols: list[int] = []
    for f, power in enumerate(alpha):
        symbols.extend([f] * power)
    total = 0.0
    for seq in sorted(set(itertools.permutations(symbols))):
        v = filters[0][:, seq[0], seq[1]].astype(np.float64)
        for t in range(1, k):
            v = filters[t][:, :, seq[t + 1]] @ v
        total += float(v[h])
    return total


# ---------------------------------------------------------------------------
# Check drivers. Each returns {name, passed, worst_deviation, details}.


def _report(name: str, worst: float, tol: float, details: dict) -> dict:
    return {
        "name": name,
        "passed": bool(worst <= tol),
        "worst_deviation": float(worst),
        "details": details,
    }


def check_crossnet_collinearity(
    width: int, depth: int, trials: int, seed: int, tol: float = 1e-10
) -> dict:
    """Bias-free cross layers keep the output on the input's line.

    Also replays the explicit scalar recursion (multiplier picks up a factor
    1 + <x0, w_t> per layer) and records its worst relative deviation.
    """
    worst_cos = 0.0
    worst_scalar = 0.0
    for trial in range(trials):
        rng = Rng(derive_seed(seed, width, depth, trial))
        x0 = rng.normals(width)
        while not np.any(x0):
            x0 = rng.normals(width)
        ws = [rng.normals(width) for _ in range(depth)]
        out = comp.crossnet_forward(x0, ws, [np.zeros(width)] * depth)
        cos = abs(float(out @ x0)) / (
            float(np.linalg.norm(out)) * float(np.linalg.norm(x0))
        )
        worst_cos = max(worst_cos, abs(cos - 1.0))
        multiplier = 1.0
        for w in ws:
            multiplier *= 1.0 + float(x0 @ w)
        scale = max(float(np.max(np.abs(out))), 1.0)
        worst_scalar = max(
            worst_scalar, float(np.max(np.abs(out - multiplier * x0))) / scale
        )
    return _report(
        "collinearity",
        worst_cos,
        tol,
        {
            "width": width,
            "depth": depth,
            "trials": trials,
            "worst_scalar_deviation": worst_scalar,
        },
    )


def run_collinearity_checks(
    widths=(4, 12, 40), max_depth: int = 6, trials: int = 100, seed: int = 0
) -> dict:
    """Aggregate sweep used by the verify command and the acceptance gate."""
    worst = 0.0
    worst_scalar = 0.0
    cases = 0
    for width in widths:
        for depth in range(1, max_depth + 1):
            rep = check_crossnet_collinearity(width, depth, trials, seed)
            worst = max(worst, rep["worst_deviation"])
            worst_scalar = max(worst_scalar, rep["details"]["worst_scalar_deviation"])
            cases += trials
    return _report(
        "collinearity",
        worst,
        1e-10,
        {
            "widths": list(widths),
            "depths": f"1..{max_depth}",
            "cases": cases,
            "worst_scalar_deviation": worst_scalar,
        },
    )


def count_parameters(
    spec: model_mod.ModelSpec, n_features: int, field_count: int
) -> dict[str, int]:
    """Closed-form per-bucket parameter counts, summed by hand.

    Layer weights and the per-part output vectors land in the part's main
    bucket; additive bias vectors are tallied separately so every bucket is
    directly comparable with the allocated arrays.
    """
    m, d = field_count, spec.embedding_dim
    counts = {key: 0 for key in model_mod.CENSUS_KEYS}
    if spec.needs_embedding:
        counts["embedding"] = n_features * d
    if "linear" in spec.parts:
        counts["linear"] = n_features
    if "dnn" in spec.parts:
        widths = spec.dnn.widths
        total = m * d * widths[0] + widths[-1]
        for k in range(1, len(widths)):
            total += widths[k] * widths[k - 1]
        counts["dnn"] = total
        counts["dnn_biases"] = sum(widths)
    if "cin" in spec.parts:
        widths = spec.cin.widths
        prev = m
        filters = 0
        for width in widths:
            if spec.cin.rank > 0:
                filters += width * spec.cin.rank * (prev + m)
            else:
                filters += width * prev * m
            prev = width
        counts["cin_filters"] = filters
        counts["cin_output"] = sum(widths)
    if "cross" in spec.parts:
        counts["cross"] = spec.cross.depth * m * d + m * d
        counts["cross_biases"] = spec.cross.depth * m * d
    if "fm" in spec.parts:
        counts["fm"] = 1
    counts["bias"] = 1
    counts["total"] = sum(counts[key] for key in model_mod.CENSUS_KEYS)
    return counts


def _random_spec(rng: Rng) -> model_mod.ModelSpec:
    all_parts = ["linear", "fm", "dnn", "cin", "cross"]
    mask = rng.integers(len(all_parts), 2)
    parts = [p for p, keep in zip(all_parts, mask) if keep]
    if not parts:
        parts = ["cin"]
    dnn_widths = tuple(int(w) + 1 for w in rng.integers(int(rng.integers(1, 3)[0]) + 1, 8))
    cin_widths = tuple(int(w) + 1 for w in rng.integers(int(rng.integers(1, 3)[0]) + 1, 4))
    rank = int(rng.integers(1, 3)[0])  # 0..2
    return model_mod.ModelSpec(
        parts=frozenset(parts),
        embedding_dim=int(rng.integers(1, 6)[0]) + 1,
        dnn=model_mod.DnnConfig(dnn_widths, "relu"),
        cin=model_mod.CinConfig(cin_widths, "identity", rank=rank),
        cross=model_mod.CrossConfig(int(rng.integers(1, 4)[0]) + 1),
    )


def run_census_check(n_specs: int = 50, seed: int = 0) -> dict:
    """Closed forms vs the arrays the model actually allocates."""
    worst = 0
    checked = 0
    for index in range(n_specs):
        rng = Rng(derive_seed(seed, index))
        spec = _random_spec(rng)
        n_features = int(rng.integers(1, 40)[0]) + 4
        field_count = int(rng.integers(1, 4)[0]) + 2
        expected = count_parameters(spec, n_features, field_count)
        allocated = model_mod.param_census(spec, n_features, field_count)
        params = model_mod.ModelParams(spec, n_features, field_count)
        worst = max(worst, abs(allocated["total"] - params.size))
        for key, value in expected.items():
            worst = max(worst, abs(value - allocated[key]))
        checked += 1
    # the two fixed worked examples, exact
    cin_spec = model_mod.ModelSpec(
        parts=frozenset({"cin"}),
        embedding_dim=4,
        cin=model_mod.CinConfig((2, 2), "identity"),
    )
    cin_counts = count_parameters(cin_spec, 10, 3)
    worst = max(worst, abs(cin_counts["cin_filters"] + cin_counts["cin_output"] - 34))
    dnn_spec = model_mod.ModelSpec(
        parts=frozenset({"dnn"}),
        embedding_dim=4,
        dnn=model_mod.DnnConfig((2, 2), "relu"),
    )
    worst = max(worst, abs(count_parameters(dnn_spec, 10, 3)["dnn"] - 30))
    return _report(
        "params", float(worst), 0.0, {"random_specs": checked, "fixed_examples": 2}
    )


def check_fm_reduction(x0: np.ndarray, tol: float = 1e-10) -> dict:
    """Depth-1 stack with one all-ones filter sums every ordered pair
    product, so pooling equals twice the pairwise term plus the diagonal."""
    m = x0.shape[0]
    pooled, _ = comp.cin_forward(x0, [np.ones((1, m, m))], "identity")
    pairwise = comp.fm_pairwise(x0)
    diagonal = float((x0 * x0).sum())
    expected = 2.0 * pairwise + diagonal
    scale = max(abs(expected), 1.0)
    deviation = abs(float(pooled[0]) - expected) / scale
    return _report(
        "fm_reduction",
        deviation,
        tol,
        {"pooled": float(pooled[0]), "expected": expected, "m": m, "d": x0.shape[1]},
    )


def run_fm_reduction_check(trials: int = 100, seed: int = 0) -> dict:
    worst = 0.0
    for trial in range(trials):
        rng = Rng(derive_seed(seed, trial))
        m = int(rng.integers(1, 5)[0]) + 2
        d = int(rng.integers(1, 6)[0]) + 1
        x0 = rng.normals(m * d).reshape(m, d)
        rep = check_fm_reduction(x0)
        worst = max(worst, rep["worst_deviation"])
    return _report("fm_reduction", worst, 1e-10, {"trials": trials})


def run_polynomial_check(
    seed: int = 0, draws: int = 20, tol: float = 1e-8
) -> dict:
    """Numeric forward vs symbolic expansion, degree stratification, and the
    permutation-sum coefficients, over every small shape."""
    worst_value = 0.0
    worst_coeff = 0.0
    degree_ok = True
    cases = 0
    for m in (2, 3):
        for depth in (1, 2, 3):
            for width in (1, 2, 3):
                for draw in range(draws):
                    rng = Rng(derive_seed(seed, m, depth, width, draw))
                    d = int(rng.integers(1, 2)[0]) + 1
                    filters = []
                    prev = m
                    for _ in range(depth):
                        filters.append(
                            rng.normals(width * prev * m).reshape(width, prev, m)
                        )
                        prev = width
                    layers = expand_cin(filters, m)
                    x0 = rng.normals(m * d).reshape(m, d)
                    _, hidden = comp.cin_forward(x0, filters, "identity")
                    for k, polys in enumerate(layers):
                        for h, poly in enumerate(polys):
                            numeric = hidden[k][h]
                            symbolic = evaluate_polynomial(poly, x0)
                            scale = max(float(np.max(np.abs(numeric))), 1.0)
                            worst_value = max(
                                worst_value,
                                float(np.max(np.abs(numeric - symbolic))) / scale,
                            )
                            if any(sum(a) != k + 2 for a in poly):
                                degree_ok = False
                    final = layers[-1]
                    for h, poly in enumerate(final):
                        for alpha, coeff in poly.items():
                            direct = permutation_coefficient(filters, h, alpha)
                            scale = max(abs(coeff), 1.0)
                            worst_coeff = max(worst_coeff, abs(coeff - direct) / scale)
                    cases += 1
    worst = max(worst_value, worst_coeff) if degree_ok else float("inf")
    return _report(
        "polynomial",
        worst,
        tol,
        {
            "cases": cases,
            "worst_value_deviation": worst_value,
            "worst_coefficient_deviation": worst_coeff,
            "degrees_stratified": degree_ok,
        },
    )


GRADIENT_CHECK_SPECS: list[tuple[str, model_mod.ModelSpec]] = [
    ("fm", model_mod.preset("fm", embedding_dim=3)),
    (
        "xdeepfm",
        model_mod.ModelSpec(
            parts=frozenset({"linear", "dnn", "cin"}),
            embedding_dim=2,
            dnn=model_mod.DnnConfig((4, 3), "tanh"),
            cin=model_mod.CinConfig((2, 2), "identity"),
        ),
    ),
    (
        "lowrank",
        model_mod.ModelSpec(
            parts=frozenset({"cin"}),
            embedding_dim=3,
            cin=model_mod.CinConfig((3, 2), "identity", rank=1),
        ),
    ),
    (
        "crossnet",
        model_mod.ModelSpec(
            parts=frozenset({"linear", "cross"}),
            embedding_dim=2,
            cross=model_mod.CrossConfig(3),
        ),
    ),
]


def run_gradient_check(seed: int = 0, tol: float = 1e-4, lam: float = 3e-4) -> dict:
    """Analytic objective gradients vs central finite differences on small
    fixed configurations over a synthetic batch."""
    from . import data as data_mod

    synth = data_mod.SyntheticSpec(
        field_count=3,
        vocab_per_field=4,
        latent_dim=2,
        interaction_terms=(((0, 1), 1.0),),
        noise_std=0.5,
        n_instances=12,
        seed=derive_seed(seed, 101),
    )
    ds = data_mod.synthesize(synth)
    batch = data_mod.EncodedDataset(ds).full_batch()
    n, m = ds.schema.n_features, ds.schema.field_count
    worst = 0.0
    results = {}
    for label, spec in GRADIENT_CHECK_SPECS:
        params = model_mod.init_params(spec, n, m, seed=derive_seed(seed, 7))
        params.flat[:] = Rng(derive_seed(seed, 13)).normals(params.size, std=0.5)
        preds, cache = model_mod.forward_batch(params, batch)
        grad_z = (preds - batch.labels) / batch.size
        grads = model_mod.backward_batch(params, batch, cache, grad_z)
        model_mod.add_regularization_gradient(params, grads, lam)

        def objective_at(flat, spec=spec):
            trial = model_mod.ModelParams(spec, n, m, flat=flat)
            p, _ = model_mod.forward_batch(trial, batch)
            return model_mod.objective(model_mod.logloss(p, batch.labels), trial, lam)

        err = relative_gradient_error(
            grads, finite_diff_grad(objective_at, params.flat.copy())
        )
        results[label] = float(err)
        worst = max(worst, float(err))
    return _report("gradients", worst, tol, {"configs": results, "lambda": lam})
