"""Synthetic distribution-shift benchmark, evaluation metrics and diagnostics.

A scenario mirrors the cross-dataset protocol at desk scale:

* a *generalist* is trained on every class, drawn from broad multi-modal clusters;
* an *expert* is fine-tuned from it on the base classes only, drawn narrowly
  around a site-specific offset;
* evaluation covers the expert's own distribution (in-domain), unseen classes
  from the broad distribution (base-to-novel), and in-domain inputs under
  additive noise or value quantization at severities 1..5.
"""

from __future__ import annotations

import json
import math
import statistics
import os
from importlib import resources
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import dynamic, params as P
from .coefficient import CoefficientConfig, LambdaRecord
from .errors import DomainError, ValidationError
from .models import Dataset, TrainConfig, finetune, forward, train
from .probs import argmax, entropy_ratio, js_divergence, softmax
from .rng import SplitMix64, derive_seed

SEVERITIES = (1, 2, 3, 4, 5)
CORRUPTIONS = ("noise", "quantize")
SETTINGS = ("in_domain", "novel", "noise", "quantize")
SHIFT_SETTINGS = ("novel", "noise", "quantize")


# -- scenario -----------------------------------------------------------------------


@dataclass(frozen=True)
class ScenarioParams:
    d: int = 6
    c_base: int = 4
    c_novel: int = 3
    class_spread: float = 0.3
    subclusters: int = 4
    subcluster_spread: float = 0.3
    broad_noise: float = 0.1
    narrow_noise: float = 0.15
    site_shift: float = 0.5
    n_pretrain_per_class: int = 300
    n_expert_per_class: int = 200
    n_test: int = 2048
    n_novel: int = 2048
    arch: str = "linear"
    hidden: int = 32
    pretrain: TrainConfig = TrainConfig(lr=0.2, epochs=30, batch_size=32, l2=1e-3)
    expert: TrainConfig = TrainConfig(lr=0.1, epochs=30, batch_size=32, l2=1e-3)

    def __post_init__(self):
        if self.c_base < 2 or self.c_novel < 1 or self.d < 1:
            raise ValidationError("need c_base >= 2, c_novel >= 1 and d >= 1")
        if min(self.n_pretrain_per_class, self.n_expert_per_class, self.n_test, self.n_novel, self.subclusters) < 1:
            raise ValidationError("sample counts and subclusters must be positive")

    @property
    def c(self) -> int:
        return self.c_base + self.c_novel

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, block: dict) -> "ScenarioParams":
        block = dict(block)
        for key in ("pretrain", "expert"):
            if isinstance(block.get(key), dict):
                block[key] = TrainConfig(**block[key])
        return cls(**block)


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int

    def __post_init__(self):
        if self.kind not in CORRUPTIONS:
            raise DomainError(f"unknown corruption {self.kind!r}")
        if self.severity not in SEVERITIES:
            raise DomainError(f"severity {self.severity} outside 1..5")


@dataclass
class ShiftScenario:
    seed: int
    params: ScenarioParams
    pretrain_data: Dataset
    expert_data: Dataset
    test_in_domain: Dataset
    test_novel: Dataset
    test_corrupted: dict[tuple[str, int], Dataset]
    theta_pt: P.ParameterMap | None = None
    theta_ft: P.ParameterMap | None = None

    def files(self) -> dict[str, bytes]:
        """Every artifact of the scenario as ``{file name: bytes}``."""
        out = {
            "scenario.json": (json.dumps({"seed": self.seed, "params": self.params.to_json()}, indent=2, sort_keys=True) + "\n").encode(),
            "pretrain.ttds": self.pretrain_data.to_bytes(),
            "expert.ttds": self.expert_data.to_bytes(),
            "test_in_domain.ttds": self.test_in_domain.to_bytes(),
            "test_novel.ttds": self.test_novel.to_bytes(),
        }
        for (kind, s), ds in sorted(self.test_corrupted.items()):
            out[f"test_{kind}_s{s}.ttds"] = ds.to_bytes()
        if self.theta_pt is not None:
            out["pt.ttmc"] = P.checkpoint_bytes(self.theta_pt)
        if self.theta_ft is not None:
            out["ft.ttmc"] = P.checkpoint_bytes(self.theta_ft)
        return out

    def save(self, out_dir) -> None:
        os.makedirs(out_dir, exist_ok=True)
        for name, blob in self.files().items():
            P.atomic_write(os.path.join(out_dir, name), blob)

    @classmethod
    def load(cls, directory) -> "ShiftScenario":
        with open(os.path.join(directory, "scenario.json")) as fh:
            meta = json.load(fh)
        prm = ScenarioParams.from_json(meta["params"])

        def ds(name, split="test"):
            return Dataset.load(os.path.join(directory, name), split)

        corrupted = {(k, s): ds(f"test_{k}_s{s}.ttds") for k in CORRUPTIONS for s in SEVERITIES}
        pt = os.path.join(directory, "pt.ttmc")
        ft = os.path.join(directory, "ft.ttmc")
        return cls(
            int(meta["seed"]),
            prm,
            ds("pretrain.ttds", "train"),
            ds("expert.ttds", "train"),
            ds("test_in_domain.ttds"),
            ds("test_novel.ttds"),
            corrupted,
            P.load_checkpoint(pt) if os.path.exists(pt) else None,
            P.load_checkpoint(ft) if os.path.exists(ft) else None,
        )

    def settings(self) -> dict[str, list[Dataset]]:
        """Evaluation sets grouped by reported setting (corruptions span all severities)."""
        return {
            "in_domain": [self.test_in_domain],
            "novel": [self.test_novel],
            "noise": [self.test_corrupted[("noise", s)] for s in SEVERITIES],
            "quantize": [self.test_corrupted[("quantize", s)] for s in SEVERITIES],
        }


def _sample_classes(rng, centers, classes, n_per_class, noise, offset):
    """``n_per_class`` points per class around a random sub-cluster center."""
    X, y = [], []
    for c in classes:
        k = len(centers[c])
        pick = (rng.next_u64(n_per_class) % np.uint64(k)).astype(np.int64)
        X.append(centers[c][pick] + offset + noise * rng.normal((n_per_class, offset.shape[0])))
        y.append(np.full(n_per_class, c))
    X, y = np.concatenate(X), np.concatenate(y)
    order = rng.permutation(len(y))
    return X[order], y[order]


def gen_scenario(seed: int, params: ScenarioParams = ScenarioParams(), train_models: bool = True) -> ShiftScenario:
    prm = params
    rng = SplitMix64(derive_seed(seed, "geometry"))
    means = prm.class_spread * rng.normal((prm.c, prm.d))
    centers = [m + prm.subcluster_spread * rng.normal((prm.subclusters, prm.d)) for m in means]
    site = rng.normal(prm.d)
    site *= prm.site_shift / np.linalg.norm(site)
    zero = np.zeros(prm.d)
    base = range(prm.c_base)
    novel = range(prm.c_base, prm.c)
    # the site only sees one sub-cluster per base class
    site_centers = [c[:1] for c in centers]

    rng = SplitMix64(derive_seed(seed, "data"))
    Xp, yp = _sample_classes(rng, centers, range(prm.c), prm.n_pretrain_per_class, prm.broad_noise, zero)
    Xe, ye = _sample_classes(rng, site_centers, base, prm.n_expert_per_class, prm.narrow_noise, site)
    per_base = -(-prm.n_test // prm.c_base)
    Xi, yi = _sample_classes(rng, site_centers, base, per_base, prm.narrow_noise, site)
    per_novel = -(-prm.n_novel // prm.c_novel)
    Xn, yn = _sample_classes(rng, centers, novel, per_novel, prm.broad_noise, zero)

    in_domain = Dataset(Xi[: prm.n_test], yi[: prm.n_test], prm.c, "test")
    scenario = ShiftScenario(
        seed,
        prm,
        Dataset(Xp, yp, prm.c, "train"),
        Dataset(Xe, ye, prm.c, "train"),
        in_domain,
        Dataset(Xn[: prm.n_novel], yn[: prm.n_novel], prm.c, "test"),
        {
            (k, s): Dataset(corrupt(in_domain.X, CorruptionSpec(k, s), SplitMix64(derive_seed(seed, k, s))), in_domain.y, prm.c)
            for k in CORRUPTIONS
            for s in SEVERITIES
        },
    )
    if train_models:
        scenario.theta_pt = train(scenario.pretrain_data, prm.pretrain, SplitMix64(derive_seed(seed, "pretrain")), prm.arch, prm.hidden)
        scenario.theta_ft = finetune(scenario.theta_pt, scenario.expert_data, prm.expert, SplitMix64(derive_seed(seed, "finetune")))
    return scenario


def corrupt(X, spec: CorruptionSpec, rng) -> np.ndarray:
    """Noise adds N(0, (0.1*s)^2); quantize rounds onto a grid of 2**(6-s) levels per unit.

    Rounding is half-to-even (``numpy.round``).
    """
    if not isinstance(spec, CorruptionSpec):
        spec = CorruptionSpec(*spec)
    X = np.asarray(X, dtype=np.float64)
    s = spec.severity
    if spec.kind == "noise":
        return X + 0.1 * s * np.asarray(rng.normal(X.shape))
    q = 2.0 ** (6 - s)
    return np.round(X * q) / q


# -- metrics --------------------------------------------------------------------------


def top1_accuracy(preds, y) -> float:
    preds, y = np.asarray(preds), np.asarray(y)
    if preds.shape != y.shape:
        raise ValidationError(f"length mismatch {preds.shape} vs {y.shape}")
    if preds.size == 0:
        raise ValidationError("accuracy of an empty prediction set")
    return float(np.mean(preds == y))


def corruption_error(acc_method: float, acc_base: float) -> float:
    """Error rate relative to the base model's, in percent."""
    if not (0.0 <= acc_method <= 1.0 and 0.0 <= acc_base <= 1.0):
        raise DomainError("accuracies must lie in [0, 1]")
    if acc_base == 1.0:
        raise DomainError("base model makes no errors; relative error is undefined")
    return 100.0 * ((1.0 - acc_method) / (1.0 - acc_base))


def mean_over_shifts(b2n: float, noise: float, digital: float) -> float:
    return float(statistics.mean((b2n, noise, digital)))


def pearson(a, b) -> float:
    """Sample Pearson correlation; 0 when either series is constant."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValidationError("pearson needs two 1-D series of equal length")
    if len(a) < 2:
        return 0.0
    da, db = a - a.mean(), b - b.mean()
    denom = math.sqrt(float(np.dot(da, da)) * float(np.dot(db, db)))
    if denom == 0.0:
        return 0.0
    return float(np.clip(np.dot(da, db) / denom, -1.0, 1.0))


def lambda_histogram(records, bins: int = 10) -> dict:
    """Counts of lambda' over equal-width bins of [0, 1]; 1.0 lands in the last bin."""
    if bins < 1:
        raise DomainError("bins must be >= 1")
    lam = np.array([r.lambda_prime if isinstance(r, LambdaRecord) else float(r) for r in records], dtype=np.float64)
    idx = np.clip(np.floor(lam * bins).astype(np.int64), 0, bins - 1)
    counts = np.bincount(idx, minlength=bins)
    return {"edges": np.linspace(0.0, 1.0, bins + 1).tolist(), "counts": counts.tolist()}


def load_published_tables() -> dict:
    """Published accuracy and Err tables shipped as package data (values in percent)."""
    return json.loads(resources.files("ttmerge").joinpath("data/paper_tables.json").read_text())


def pinned_scenario_spec() -> dict:
    """Seed, parameters and file digests of the shipped reference scenario."""
    return json.loads(resources.files("ttmerge").joinpath("data/pinned_scenario.json").read_text())


def reproduce_err_table(tables: dict) -> dict[str, dict[str, dict[str, float]]]:
    """Err cells recomputed from the accuracy tables with the Pretrained row as base.

    Accuracies are in percent; the shift columns are recomputed per setting and the
    ``mean`` column is the mean of the three recomputed shift errors.
    """
    out = {}
    for modality, rows in tables["err"].items():
        acc = tables["accuracy"][modality]
        base = acc["Pretrained"]
        out[modality] = {}
        for method in rows:
            cells = {
                col: corruption_error(acc[method][col] / 100.0, base[col] / 100.0)
                for col in ("in_domain", "b2n", "noise", "digital")
            }
            cells["mean"] = mean_over_shifts(cells["b2n"], cells["noise"], cells["digital"])
            out[modality][method] = cells
    return out


# -- diagnostics ----------------------------------------------------------------------

QUADRANTS = ("TrueTrue", "TrueFalse", "FalseTrue", "FalseFalse")


@dataclass
class QuadrantReport:
    counts: dict[str, int]
    mean_I: dict[str, float | None]
    mean_R: dict[str, float | None]
    rho: dict[str, float | None]
    rho_all: float
    n: int

    def to_json(self) -> dict:
        return asdict(self)


def quadrant_analysis(theta_pt, theta_ft, data: Dataset) -> QuadrantReport:
    """Group samples by (generalist correct?, expert correct?) and relate I(x) to R(x).

    Group names read generalist first: ``TrueFalse`` means only the generalist is right.
    """
    p_pt = softmax(forward(theta_pt, data.X))
    p_ft = softmax(forward(theta_ft, data.X))
    I = js_divergence(p_pt, p_ft)
    R = entropy_ratio(p_pt, p_ft)
    ok_pt = argmax(p_pt) == data.y
    ok_ft = argmax(p_ft) == data.y
    masks = {
        "TrueTrue": ok_pt & ok_ft,
        "TrueFalse": ok_pt & ~ok_ft,
        "FalseTrue": ~ok_pt & ok_ft,
        "FalseFalse": ~ok_pt & ~ok_ft,
    }
    counts, mean_I, mean_R, rho = {}, {}, {}, {}
    for name in QUADRANTS:
        m = masks[name]
        counts[name] = int(m.sum())
        if counts[name] == 0:
            mean_I[name] = mean_R[name] = rho[name] = None
        else:
            mean_I[name] = float(I[m].mean())
            mean_R[name] = float(R[m].mean())
            rho[name] = pearson(I[m], R[m])
    return QuadrantReport(counts, mean_I, mean_R, rho, pearson(I, R), len(data))


# -- benchmark ------------------------------------------------------------------------

METHODS = (
    "pretrained",
    "expert",
    "ensemble",
    "soup",
    "task_arith",
    "slerp",
    "ties",
    "mixup",
    "dawin",
    "t3",
    "t3_batch",
)


@dataclass(frozen=True)
class MethodSpec:
    """A method name plus optional numeric argument, written ``name`` or ``name:value``.

    ``fixed:a`` is a static lerp at weight ``a``; ``soup``, ``task_arith`` (scale),
    ``slerp`` (t), ``ties`` (keep fraction) and ``mixup`` (Beta alpha) accept an argument.
    """

    name: str
    arg: float | None = None

    @classmethod
    def parse(cls, text: str) -> "MethodSpec":
        name, _, arg = text.strip().partition(":")
        if name not in METHODS and name != "fixed":
            raise ValidationError(f"unknown method {name!r}; choose from {', '.join(METHODS + ('fixed',))}")
        if name == "fixed" and not arg:
            raise ValidationError("fixed needs a weight, e.g. fixed:0.5")
        try:
            return cls(name, float(arg) if arg else None)
        except ValueError:
            raise ValidationError(f"bad numeric argument in {text!r}") from None

    def __str__(self) -> str:
        return self.name if self.arg is None else f"{self.name}:{self.arg:g}"


@dataclass
class EvalReport:
    method: str
    accuracy: dict[str, float]
    err: dict[str, float]
    mean_shift_acc: float | None
    mCE: float | None
    lambda_stats: dict | None
    counter: dict[str, int]
    severity_accuracy: dict[str, dict[str, float]] = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)


def static_merge(spec: MethodSpec, theta_pt, theta_ft, seed: int):
    """Weights for the data-independent methods, plus the coefficient if one was drawn."""
    a = spec.arg
    if spec.name == "pretrained":
        return theta_pt, None
    if spec.name == "expert":
        return theta_ft, None
    if spec.name in ("soup", "fixed"):
        lam = 0.5 if a is None else a
        return P.lerp_params(theta_pt, theta_ft, lam), lam
    if spec.name == "task_arith":
        return P.task_arithmetic(theta_pt, theta_ft, 1.0 if a is None else a), None
    if spec.name == "slerp":
        return P.slerp_params(theta_pt, theta_ft, 0.5 if a is None else a), None
    if spec.name == "ties":
        return P.ties_merge(theta_pt, theta_ft, 0.2 if a is None else a, 1.0), None
    if spec.name == "mixup":
        return P.mixup_merge(theta_pt, theta_ft, SplitMix64(derive_seed(seed, "mixup")), 0.5 if a is None else a)
    raise ValidationError(f"{spec} is not a static merge")


def _evaluate(spec, theta_pt, theta_ft, datasets, cfg, batch_size, seed, caches=None):
    """Predictions per dataset for one method; returns (preds list, records, counter)."""
    counter = dynamic.ForwardCounter()
    preds, records = [], []
    if spec.name == "ensemble":
        preds = [dynamic.predict_ensemble(theta_pt, theta_ft, ds, batch_size, counter) for ds in datasets]
    elif spec.name == "dawin":
        dcfg = CoefficientConfig(policy="entropy_ratio", direction=cfg.direction, eps=cfg.eps)
        for ds in datasets:
            p, r = dynamic.predict_t3(theta_pt, theta_ft, ds, dcfg, counter)
            preds.append(p)
            records.extend(r)
    elif spec.name == "t3":
        for i, ds in enumerate(datasets):
            if caches is not None:
                cache = caches[i]
                preds.append(dynamic.predict_with_cache(theta_pt, theta_ft, ds, cache, "sample", counter, cfg))
                records.extend(cache.per_sample)
            else:
                p, r = dynamic.predict_t3(theta_pt, theta_ft, ds, cfg, counter)
                preds.append(p)
                records.extend(r)
    elif spec.name == "t3_batch":
        for i, ds in enumerate(datasets):
            if caches is not None:
                cache = caches[i]
                if cache.batch_size != batch_size:
                    raise ValidationError(f"cache batch size {cache.batch_size} != requested {batch_size}")
                preds.append(dynamic.predict_with_cache(theta_pt, theta_ft, ds, cache, "batch", counter, cfg))
                records.extend(cache.per_sample)
            else:
                p, r, _ = dynamic.predict_t3_batch(theta_pt, theta_ft, ds, cfg, batch_size, counter)
                preds.append(p)
                records.extend(r)
    else:
        theta, lam = static_merge(spec, theta_pt, theta_ft, seed)
        if theta is not theta_pt and theta is not theta_ft:
            counter.merges += 1
        preds = [dynamic.predict_single(theta, ds, batch_size, counter) for ds in datasets]
        if lam is not None:
            records = [lam]
    return preds, records, counter


def _lambda_stats(records, bins=10):
    if not records:
        return None
    lam = np.array([r.lambda_prime if isinstance(r, LambdaRecord) else float(r) for r in records])
    return {"mean": float(lam.mean()), "std": float(lam.std()), "histogram": lambda_histogram(lam, bins)["counts"]}


def thread_count() -> int:
    raw = os.environ.get("TTMC_THREADS", "")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def run_benchmark(
    scenario: ShiftScenario,
    methods,
    cfg: CoefficientConfig = CoefficientConfig(),
    batch_size: int = dynamic.DEFAULT_BATCH_SIZE,
    caches: dict[str, list] | None = None,
) -> list[EvalReport]:
    """Evaluate each method on every setting; Err is relative to the generalist.

    ``caches`` optionally maps setting name to one LambdaCache per dataset in that
    setting, used by ``t3``/``t3_batch`` instead of the online coefficient path.
    """
    if scenario.theta_pt is None or scenario.theta_ft is None:
        raise ValidationError("scenario has no trained checkpoints")
    specs = [m if isinstance(m, MethodSpec) else MethodSpec.parse(m) for m in methods]
    settings = scenario.settings()
    theta_pt, theta_ft = scenario.theta_pt, scenario.theta_ft

    base_acc = {
        name: [top1_accuracy(dynamic.predict_single(theta_pt, ds, batch_size, dynamic.ForwardCounter()), ds.y) for ds in dss]
        for name, dss in settings.items()
    }

    def one(spec):
        acc, err, sev, records, counter = {}, {}, {}, [], dynamic.ForwardCounter()
        for name, dss in settings.items():
            c = caches.get(name) if caches else None
            preds, recs, cnt = _evaluate(spec, theta_pt, theta_ft, dss, cfg, batch_size, scenario.seed, c)
            per = [top1_accuracy(p, ds.y) for p, ds in zip(preds, dss)]
            errs = [corruption_error(a, b) for a, b in zip(per, base_acc[name])]
            acc[name] = float(statistics.mean(per))
            err[name] = float(statistics.mean(errs))
            if len(per) > 1:
                sev[name] = {str(s): a for s, a in zip(SEVERITIES, per)}
            records.extend(recs)
            counter = counter + cnt
        return EvalReport(
            str(spec),
            acc,
            err,
            mean_over_shifts(*(acc[s] for s in SHIFT_SETTINGS)),
            mean_over_shifts(*(err[s] for s in SHIFT_SETTINGS)),
            _lambda_stats(records),
            counter.as_dict(),
            sev,
        )

    with ThreadPoolExecutor(max_workers=thread_count()) as pool:
        return list(pool.map(one, specs))


def run_on_dataset(theta_pt, theta_ft, data: Dataset, methods, cfg=CoefficientConfig(), batch_size=dynamic.DEFAULT_BATCH_SIZE, cache=None, seed=0):
    """Single-dataset evaluation; the setting is reported as ``data``."""
    specs = [m if isinstance(m, MethodSpec) else MethodSpec.parse(m) for m in methods]
    base = top1_accuracy(dynamic.predict_single(theta_pt, data, batch_size, dynamic.ForwardCounter()), data.y)
    reports = []
    for spec in specs:
        preds, recs, cnt = _evaluate(spec, theta_pt, theta_ft, [data], cfg, batch_size, seed, None if cache is None else [cache])
        a = top1_accuracy(preds[0], data.y)
        e = corruption_error(a, base)
        reports.append(EvalReport(str(spec), {"data": a}, {"data": e}, None, None, _lambda_stats(recs), cnt.as_dict()))
    return reports


def cost_table(theta_pt, theta_ft, data: Dataset, cfg=CoefficientConfig(), batch_size=dynamic.DEFAULT_BATCH_SIZE) -> dict[str, dict[str, int]]:
    """Forward/merge counts of each inference route over one dataset."""
    out = {}

    def run(name, fn):
        c = dynamic.ForwardCounter()
        fn(c)
        out[name] = c.as_dict()

    cache = dynamic.precompute_lambdas(theta_pt, theta_ft, data, cfg, batch_size)
    run("t3", lambda c: dynamic.predict_t3(theta_pt, theta_ft, data, cfg, c))
    run("t3_batch", lambda c: dynamic.predict_t3_batch(theta_pt, theta_ft, data, cfg, batch_size, c))
    run("t3_cached", lambda c: dynamic.predict_with_cache(theta_pt, theta_ft, data, cache, "sample", c, cfg))
    run("t3_batch_cached", lambda c: dynamic.predict_with_cache(theta_pt, theta_ft, data, cache, "batch", c, cfg))
    run("single", lambda c: dynamic.predict_single(theta_pt, data, batch_size, c))
    run("ensemble", lambda c: dynamic.predict_ensemble(theta_pt, theta_ft, data, batch_size, c))
    return out


# -- report serialization -----------------------------------------------------------------


def reports_json(reports: list[EvalReport]) -> str:
    return json.dumps({"reports": [r.to_json() for r in reports]}, indent=2, sort_keys=True) + "\n"


def reports_csv(reports: list[EvalReport]) -> str:
    lines = ["method,setting,accuracy,err"]
    for r in reports:
        for setting in r.accuracy:
            lines.append(f"{r.method},{setting},{r.accuracy[setting]!r},{r.err[setting]!r}")
        if r.mean_shift_acc is not None:
            lines.append(f"{r.method},mean_shift,{r.mean_shift_acc!r},{r.mCE!r}")
    return "\n".join(lines) + "\n"
