"""Attribution of fidelity degradation to pipeline components.

A small regression forest is fit to predict the grid score from per-component
bit widths (unquantized encoded as 16). Three complementary importance
measures are computed over it:

* impurity   - total variance reduction per feature across all splits, with
  bootstrap-resampled confidence intervals;
* permutation - expected loss increase when a feature column is shuffled;
* Shapley    - exact interventional attribution by subset enumeration
  (feature count <= 8), background = the full dataset.

Each method's importances normalize to 100%; the consensus report averages
the three. A damped ordinary-least-squares baseline documents how poorly a
linear fit captures the same data.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .numerics import RngStream, derive_seed
from .pipeline import COMPONENT_ORDER, TaskKind

FP_BITS = 16
_GAIN_RTOL = 1e-12


@dataclass
class AttributionDataset:
    """Feature matrix of per-component bits against the fidelity score."""

    features: np.ndarray
    target: np.ndarray
    feature_names: tuple[str, ...]
    run_ids: tuple[str, ...] = ()

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.target = np.asarray(self.target, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] != self.target.shape[0]:
            raise ValueError("features must be (rows, m) aligned with target")
        if self.features.shape[1] != len(self.feature_names):
            raise ValueError("feature_names length does not match feature columns")
        if not np.all(np.isfinite(self.target)):
            raise ValueError("target contains missing values")
        if self.features.size and (self.features.min() < 2 or self.features.max() > 16):
            raise ValueError("bit features must lie in [2, 16]")

    def __len__(self) -> int:
        return self.features.shape[0]

    @classmethod
    def from_results(cls, table, task: TaskKind, method=None) -> "AttributionDataset":
        """Build from a results table slice; components never quantized
        (bits constant at 16 across all rows) are dropped as absent."""
        rows = [r for r in table.rows if r.task is task]
        if method is not None:
            rows = [r for r in rows if r.method is method]
        rows = [r for r in rows if np.isfinite(r.score)]
        if not rows:
            raise ValueError(f"no usable rows for task {task.value!r}")
        all_bits = np.array(
            [[r.vision_bits, r.connector_bits, r.language_bits] for r in rows], dtype=np.float64
        )
        keep = [
            i
            for i, comp in enumerate(COMPONENT_ORDER)
            if not np.all(all_bits[:, i] == FP_BITS)
        ]
        if not keep:
            raise ValueError("every component is unquantized in this slice")
        return cls(
            features=all_bits[:, keep],
            target=np.array([r.score for r in rows], dtype=np.float64),
            feature_names=tuple(COMPONENT_ORDER[i].value for i in keep),
            run_ids=tuple(r.run_id for r in rows),
        )


@dataclass
class RegressionTree:
    """Flat binary tree; feature < 0 marks a leaf. value is the node's mean target."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    count: np.ndarray
    gain: np.ndarray  # per-node variance reduction, already divided by root sample count

    def predict(self, x: np.ndarray) -> np.ndarray:
        node = np.zeros(x.shape[0], dtype=np.int32)
        while True:
            at_leaf = self.feature[node] < 0
            if at_leaf.all():
                return self.value[node]
            feat = np.maximum(self.feature[node], 0)
            go_left = x[np.arange(x.shape[0]), feat] <= self.threshold[node]
            nxt = np.where(go_left, self.left[node], self.right[node])
            node = np.where(at_leaf, node, nxt).astype(np.int32)

    def feature_gains(self, n_features: int) -> np.ndarray:
        sums = np.zeros(n_features)
        internal = self.feature >= 0
        np.add.at(sums, self.feature[internal], self.gain[internal])
        return sums


@dataclass
class ForestModel:
    trees: list[RegressionTree]
    n_features: int
    feature_names: tuple[str, ...]
    seed: int
    min_leaf: int
    bootstrap: bool

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        out = np.zeros(x.shape[0])
        for tree in self.trees:
            out += tree.predict(x)
        return out / len(self.trees)


class _TreeBuilder:
    """Single-tree fit: exhaustive scan over unique feature values per node."""

    def __init__(self, codes, uniques, y, min_leaf, features):
        self.codes = codes
        self.uniques = uniques
        self.y = y
        self.min_leaf = min_leaf
        self.features = features
        self.cols = {k: [] for k in ("feature", "threshold", "left", "right", "value", "count", "gain")}

    def _new_node(self, value, count):
        nid = len(self.cols["feature"])
        self.cols["feature"].append(-1)
        self.cols["threshold"].append(np.nan)
        self.cols["left"].append(-1)
        self.cols["right"].append(-1)
        self.cols["value"].append(value)
        self.cols["count"].append(count)
        self.cols["gain"].append(0.0)
        return nid

    def build(self, idx: np.ndarray, n_root: int) -> int:
        ysub = self.y[idx]
        n = idx.shape[0]
        total = float(ysub.sum())
        total_sq = float((ysub * ysub).sum())
        sse = total_sq - total * total / n
        nid = self._new_node(total / n, n)
        if n < 2 * self.min_leaf or sse <= _GAIN_RTOL * max(total_sq, 1e-300):
            return nid

        best = None  # (gain, feature, threshold)
        for j in self.features:
            k = self.uniques[j].shape[0]
            if k < 2:
                continue
            c = self.codes[idx, j]
            cnt = np.bincount(c, minlength=k).astype(np.float64)
            sy = np.bincount(c, weights=ysub, minlength=k)
            syy = np.bincount(c, weights=ysub * ysub, minlength=k)
            lcnt = np.cumsum(cnt)[:-1]
            rcnt = n - lcnt
            valid = (lcnt >= self.min_leaf) & (rcnt >= self.min_leaf)
            if not valid.any():
                continue
            lsy = np.cumsum(sy)[:-1]
            lsyy = np.cumsum(syy)[:-1]
            safe_l = np.where(lcnt > 0, lcnt, 1.0)
            safe_r = np.where(rcnt > 0, rcnt, 1.0)
            gain = sse - (lsyy - lsy * lsy / safe_l) - ((total_sq - lsyy) - (total - lsy) ** 2 / safe_r)
            gain[~valid] = -np.inf
            t = int(np.argmax(gain))
            if gain[t] > _GAIN_RTOL * sse and (best is None or gain[t] > best[0]):
                best = (float(gain[t]), j, t)

        if best is None:
            return nid
        gain_val, j, t = best
        threshold = float(self.uniques[j][t])
        go_left = self.codes[idx, j] <= t
        left_id = self.build(idx[go_left], n_root)
        right_id = self.build(idx[~go_left], n_root)
        self.cols["feature"][nid] = j
        self.cols["threshold"][nid] = threshold
        self.cols["left"][nid] = left_id
        self.cols["right"][nid] = right_id
        self.cols["gain"][nid] = gain_val / n_root
        return nid

    def finish(self) -> RegressionTree:
        c = self.cols
        return RegressionTree(
            feature=np.array(c["feature"], dtype=np.int32),
            threshold=np.array(c["threshold"], dtype=np.float64),
            left=np.array(c["left"], dtype=np.int32),
            right=np.array(c["right"], dtype=np.int32),
            value=np.array(c["value"], dtype=np.float64),
            count=np.array(c["count"], dtype=np.int64),
            gain=np.array(c["gain"], dtype=np.float64),
        )


def fit_random_forest(
    data: AttributionDataset,
    n_trees: int = 100,
    min_leaf: int = 2,
    max_features: int | None = None,
    seed: int = 0,
    bootstrap: bool = True,
) -> ForestModel:
    """Bagged regression trees; splits minimize weighted child variance.

    Every tree sees a same-size bootstrap resample (unless bootstrap=False)
    and scans all features by default; max_features < m draws a per-tree
    feature subset. Deterministic given the seed.
    """
    if len(data) < 10 and bootstrap:
        raise ValueError(f"need at least 10 rows to fit a forest, have {len(data)}")
    x = data.features
    n, m = x.shape
    uniques = [np.unique(x[:, j]) for j in range(m)]
    codes = np.stack(
        [np.searchsorted(uniques[j], x[:, j]).astype(np.int64) for j in range(m)], axis=1
    )
    trees = []
    for t in range(n_trees):
        stream = RngStream(derive_seed(seed, "tree", t))
        if bootstrap:
            idx = np.minimum((stream.uniforms(n) * n).astype(np.int64), n - 1)
        else:
            idx = np.arange(n, dtype=np.int64)
        if max_features is not None and max_features < m:
            chosen = tuple(int(i) for i in stream.choice(m, max_features))
        else:
            chosen = tuple(range(m))
        builder = _TreeBuilder(codes, uniques, data.target, min_leaf, chosen)
        builder.build(idx, n_root=idx.shape[0])
        trees.append(builder.finish())
    return ForestModel(
        trees=trees, n_features=m, feature_names=data.feature_names,
        seed=seed, min_leaf=min_leaf, bootstrap=bootstrap,
    )


@dataclass
class ImportanceReport:
    """Per-feature importance with uncertainty and sum-to-100 percentages."""

    method: str
    feature_names: tuple[str, ...]
    importance: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    pct: np.ndarray
    degenerate: bool = False

    @property
    def ranking(self) -> tuple[str, ...]:
        order = np.argsort(-self.pct, kind="stable")
        return tuple(self.feature_names[i] for i in order)

    def to_dict(self) -> dict:
        def _clean(v: float):
            return float(v) if np.isfinite(v) else None

        return {
            "method": self.method,
            "degenerate": self.degenerate,
            "features": [
                {
                    "name": self.feature_names[i],
                    "importance": _clean(self.importance[i]),
                    "ci_low": _clean(self.ci_low[i]),
                    "ci_high": _clean(self.ci_high[i]),
                    "pct": _clean(self.pct[i]),
                }
                for i in range(len(self.feature_names))
            ],
        }


def _normalize_pct(raw: np.ndarray) -> tuple[np.ndarray, bool]:
    total = float(raw.sum())
    if total <= 0:
        return np.full(raw.shape, 100.0 / raw.shape[0]), True
    return raw / total * 100.0, False


def _shares(values: np.ndarray) -> np.ndarray:
    total = float(values.sum())
    return values / total if total > 0 else np.zeros_like(values)


def impurity_importance(forest: ForestModel) -> ImportanceReport:
    """Mean per-feature variance reduction across trees, normalized to sum 1."""
    sums = np.zeros(forest.n_features)
    for tree in forest.trees:
        sums += tree.feature_gains(forest.n_features)
    sums /= len(forest.trees)
    shares = _shares(sums)
    pct, degenerate = _normalize_pct(sums)
    nan = np.full(forest.n_features, np.nan)
    return ImportanceReport(
        method="impurity", feature_names=forest.feature_names,
        importance=shares, ci_low=nan, ci_high=nan, pct=pct, degenerate=degenerate,
    )


def bootstrap_importance_ci(
    data: AttributionDataset,
    n_boot: int = 100,
    seed: int = 0,
    n_trees: int = 100,
    min_leaf: int = 2,
) -> ImportanceReport:
    """Impurity importance with 95% CIs from row-resampled forest refits.

    The point estimate comes from the forest fit on the original rows; the
    interval is the 2.5/97.5 percentile of each feature's importance share
    over n_boot resamples.
    """
    point = impurity_importance(
        fit_random_forest(data, n_trees=n_trees, min_leaf=min_leaf, seed=derive_seed(seed, "point"))
    )
    n = len(data)
    boot_shares = np.zeros((n_boot, data.features.shape[1]))
    for b in range(n_boot):
        stream = RngStream(derive_seed(seed, "boot", b))
        idx = np.minimum((stream.uniforms(n) * n).astype(np.int64), n - 1)
        resample = AttributionDataset(
            features=data.features[idx], target=data.target[idx],
            feature_names=data.feature_names,
        )
        refit = fit_random_forest(
            resample, n_trees=n_trees, min_leaf=min_leaf, seed=derive_seed(seed, "boot-fit", b)
        )
        boot_shares[b] = impurity_importance(refit).importance
    ci_low = np.percentile(boot_shares, 2.5, axis=0)
    ci_high = np.percentile(boot_shares, 97.5, axis=0)
    return ImportanceReport(
        method="impurity", feature_names=data.feature_names,
        importance=point.importance, ci_low=ci_low, ci_high=ci_high,
        pct=point.pct, degenerate=point.degenerate,
    )


def permutation_importance(
    forest: ForestModel, data: AttributionDataset, n_repeats: int = 50, seed: int = 0
) -> ImportanceReport:
    """Mean squared-error increase when one feature column is shuffled.

    Raw (possibly negative) averages are kept in ``importance``; percentages
    use the negatives clamped to zero. The CI is a normal approximation over
    the repeat values.
    """
    x = data.features
    n, m = x.shape
    base_pred = forest.predict(x)
    base_mse = float(np.mean((base_pred - data.target) ** 2))
    increases = np.zeros((m, n_repeats))
    for j in range(m):
        for rep in range(n_repeats):
            stream = RngStream(derive_seed(seed, "perm", j, rep))
            shuffled = x.copy()
            shuffled[:, j] = x[stream.permutation(n), j]
            mse = float(np.mean((forest.predict(shuffled) - data.target) ** 2))
            increases[j, rep] = mse - base_mse
    mean = increases.mean(axis=1)
    if n_repeats > 1:
        half = 1.96 * increases.std(axis=1, ddof=1) / math.sqrt(n_repeats)
    else:
        half = np.zeros(m)
    clamped = np.maximum(mean, 0.0)
    pct, degenerate = _normalize_pct(clamped)
    return ImportanceReport(
        method="permutation", feature_names=data.feature_names,
        importance=mean, ci_low=mean - half, ci_high=mean + half,
        pct=pct, degenerate=degenerate,
    )


def _interventional_value(forest: ForestModel, x: np.ndarray, subset: tuple[int, ...]) -> np.ndarray:
    """f_x(S): mean prediction with S fixed to each row's values and the rest
    drawn from every background row (background = the dataset itself)."""
    n, m = x.shape
    if not subset:
        return np.full(n, float(forest.predict(x).mean()))
    if len(subset) == m:
        return forest.predict(x)
    synth = np.tile(x, (n, 1))  # row-major blocks: block i = backgrounds for row i
    for j in subset:
        synth[:, j] = np.repeat(x[:, j], n)
    compact, inverse = np.unique(synth, axis=0, return_inverse=True)
    preds = forest.predict(compact)[inverse]
    return preds.reshape(n, n).mean(axis=1)


def shapley_values(forest: ForestModel, data: AttributionDataset) -> tuple[np.ndarray, np.ndarray, float]:
    """Exact per-row Shapley attributions by subset enumeration.

    Returns (phi, prediction, base) with phi of shape (rows, features);
    rows satisfy sum_j phi_j = f(x) - base exactly up to float rounding.
    """
    m = data.features.shape[1]
    if m > 8:
        raise ValueError(
            f"exact enumeration supports at most 8 features, got {m}; "
            "use a sampling approximation instead"
        )
    x = data.features
    values: dict[int, np.ndarray] = {}
    for mask in range(1 << m):
        subset = tuple(j for j in range(m) if mask >> j & 1)
        values[mask] = _interventional_value(forest, x, subset)
    fact = [math.factorial(i) for i in range(m + 1)]
    phi = np.zeros((x.shape[0], m))
    for mask in range(1 << m):
        size = bin(mask).count("1")
        for j in range(m):
            if mask >> j & 1:
                continue
            weight = fact[size] * fact[m - size - 1] / fact[m]
            phi[:, j] += weight * (values[mask | (1 << j)] - values[mask])
    return phi, values[(1 << m) - 1], float(values[0][0])


def shapley_importance(forest: ForestModel, data: AttributionDataset) -> ImportanceReport:
    """Global importance as the mean |phi_j| over rows, normalized to percent."""
    phi, _, _ = shapley_values(forest, data)
    mean_abs = np.mean(np.abs(phi), axis=0)
    pct, degenerate = _normalize_pct(mean_abs)
    nan = np.full(data.features.shape[1], np.nan)
    return ImportanceReport(
        method="shapley", feature_names=data.feature_names,
        importance=mean_abs, ci_low=nan, ci_high=nan, pct=pct, degenerate=degenerate,
    )


def linear_baseline_r2(data: AttributionDataset) -> float:
    """Training R^2 of damped ordinary least squares on the bit features."""
    if len(data) < 4:
        raise ValueError(f"need at least 4 rows for the linear baseline, have {len(data)}")
    x = np.concatenate([np.ones((len(data), 1)), data.features], axis=1)
    if np.linalg.matrix_rank(x) < x.shape[1]:
        warnings.warn("design matrix is rank-deficient; R^2 comes from the damped pseudo-solution")
    gram = x.T @ x
    damp = 1e-9 * float(np.mean(np.diag(gram)))
    beta = np.linalg.solve(gram + damp * np.eye(x.shape[1]), x.T @ data.target)
    residual = data.target - x @ beta
    ss_tot = float(np.sum((data.target - data.target.mean()) ** 2))
    if ss_tot <= 1e-12 * max(1.0, float(np.sum(data.target**2))):
        return 0.0  # zero total variance: R^2 is 0 by convention
    return 1.0 - float(np.sum(residual * residual)) / ss_tot


def consensus_ranking(reports: list[ImportanceReport]) -> ImportanceReport:
    """Average the three methods' percentages; output sums to 100."""
    if len(reports) != 3:
        raise ValueError(f"consensus expects the three method reports, got {len(reports)}")
    names = reports[0].feature_names
    for rep in reports[1:]:
        if rep.feature_names != names:
            raise ValueError(f"feature mismatch: {rep.feature_names} vs {names}")
    stacked = []
    for rep in reports:
        pct, _ = _normalize_pct(np.maximum(rep.pct, 0.0))
        stacked.append(pct)
    mean_pct = np.mean(stacked, axis=0)
    nan = np.full(len(names), np.nan)
    return ImportanceReport(
        method="consensus", feature_names=names,
        importance=mean_pct / 100.0, ci_low=nan, ci_high=nan, pct=mean_pct,
    )


CONSENSUS_CSV_HEADER = "model,method,task," + ",".join(f"{c.value}_pct" for c in COMPONENT_ORDER)


def consensus_csv_row(model: str, method: str, task: str, report: ImportanceReport) -> str:
    """One consensus table row; components absent from the report print as --."""
    by_name = dict(zip(report.feature_names, report.pct))
    cells = [model, method, task]
    for comp in COMPONENT_ORDER:
        value = by_name.get(comp.value)
        cells.append("--" if value is None else f"{value:.4f}")
    return ",".join(cells)
