"""Training, evaluation and prediction drivers.

Config files are line-oriented ``key = value`` text. Keys map onto
:class:`TrainConfig` fields; ``aug.<field>`` and ``model.<field>`` keys go to
the augmentation and model configs. Lists are comma separated, ``#`` starts a
comment.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import losses, metrics
from .autograd import Tensor
from .ensemble import de_predict, mcd_predict
from .errors import ConfigError, InvalidInputError, NumericError, ShapeError
from .geom import GRID_HALF_EXTENT, PlanePose
from .net import METHODS, AdamState, Model, ModelConfig, adam_step, count_params, load_checkpoint, save_checkpoint
from .volume import (
    AugmentConfig,
    SliceImage,
    Volume,
    generate_phantom,
    make_batch,
    read_volume,
    sample_pose,
)

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("method", "ED", "ED_norm", "PA", "MSE", "NCC", "SSIM", "mean_var", "params")
LOG_COLUMNS = ("epoch", "train_loss", "val_loss", "val_ED", "val_PA")


@dataclass(frozen=True)
class TrainConfig:
    method: str = "qaerts"
    epochs: int = 200
    lr: float = 1e-4
    batch_size: int = 16
    patience: int = 20
    seed: int = 0
    members: int = 5
    mc_passes: int = 5
    dropout_rate: float = 0.1
    nig_lambda: float = 0.01
    variance_warmup: int = 0
    train_volumes: tuple = (1, 2)
    val_volumes: tuple = (3,)
    test_volumes: tuple = (4, 5)
    volume_paths: tuple = ()
    volume_dims: tuple = (160, 160, 160)
    resolution: int = 32
    metric_resolution: int = 64
    val_size: int = 32
    n_per_volume: int = 32
    label_noise: tuple = (0.0, 0.0)
    workers: int = 1
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    model: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.epochs < 0 or self.batch_size < 1 or self.patience < 1:
            raise ConfigError("epochs >= 0, batch_size >= 1 and patience >= 1 are required")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if self.method == "de" and self.members < 1:
            raise ConfigError("deep ensembles need members >= 1")
        if self.method == "mcd" and not 0.0 < self.dropout_rate < 1.0:
            raise ConfigError("mcd needs a dropout rate in (0, 1)")
        if not (self.train_volumes or self.volume_paths):
            raise ConfigError("no training volumes given")
        lo, hi = self.label_noise
        if lo < 0 or hi < 0:
            raise ConfigError("label noise amplitudes must be non-negative")

    def model_config(self) -> ModelConfig:
        kw = dict(self.model)
        kw.setdefault("in_size", self.resolution)
        if self.method == "mcd":
            kw.setdefault("dropout", self.dropout_rate)
        return ModelConfig.for_method(self.method, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["augment"] = asdict(self.augment)
        return d


# ---------------------------------------------------------------------------
# config files
# ---------------------------------------------------------------------------


def _parse_value(text: str):
    text = text.strip()
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if "," in text:
        return tuple(_parse_value(t) for t in text.split(",") if t.strip())
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def _as_tuple(v):
    return v if isinstance(v, tuple) else (v,)


def parse_config_text(text: str, **overrides) -> TrainConfig:
    top, aug, model = {}, {}, {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        parsed = _parse_value(value)
        if key.startswith("aug."):
            aug[key[4:]] = parsed
        elif key.startswith("model."):
            model[key[6:]] = parsed
        else:
            top[key] = parsed
    top.update({k: v for k, v in overrides.items() if v is not None})
    return build_config(top, aug, model)


def build_config(top: dict, aug: dict | None = None, model: dict | None = None) -> TrainConfig:
    known = {f.name: f for f in fields(TrainConfig)}
    for k in top:
        if k not in known or k in ("augment", "model"):
            raise ConfigError(f"unknown config key {k!r}")
    tuple_keys = ("train_volumes", "val_volumes", "test_volumes", "volume_paths", "volume_dims", "label_noise")
    kw = {k: (_as_tuple(v) if k in tuple_keys else v) for k, v in top.items()}
    aug_fields = {f.name for f in fields(AugmentConfig)}
    aug = dict(aug or {})
    for k, v in aug.items():
        if k not in aug_fields:
            raise ConfigError(f"unknown augmentation key {k!r}")
        if k in ("rot_xy_range", "rot_z_range"):
            aug[k] = float(v)
    try:
        kw["augment"] = AugmentConfig(**aug)
        model_fields = {f.name for f in fields(ModelConfig)}
        model = dict(model or {})
        for k, v in model.items():
            if k not in model_fields:
                raise ConfigError(f"unknown model key {k!r}")
            if k in ("channels", "heads"):
                model[k] = _as_tuple(v)
        kw["model"] = model
        return TrainConfig(**kw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path=None, **overrides) -> TrainConfig:
    text = Path(path).read_text() if path else ""
    return parse_config_text(text, **overrides)


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


@lru_cache(maxsize=16)
def phantom(seed: int, dims: tuple) -> Volume:
    return generate_phantom(seed, dims)


def volumes_for(cfg: TrainConfig, split: str) -> list[Volume]:
    if cfg.volume_paths and split == "train":
        return [read_volume(p) for p in cfg.volume_paths]
    seeds = {"train": cfg.train_volumes, "val": cfg.val_volumes, "test": cfg.test_volumes}[split]
    return [phantom(int(s), tuple(cfg.volume_dims)) for s in seeds]


def label_noise_amplitude(tz, cfg: TrainConfig):
    """Label noise standard deviation, linear in the slice's z translation."""
    lo, hi = cfg.label_noise
    zlo, zhi = cfg.augment.trans_z_range
    frac = 0.0 if zhi == zlo else (np.asarray(tz) - zlo) / (zhi - zlo)
    return lo + (hi - lo) * frac


def slice_tz(s: SliceImage) -> float:
    return float(s.aug_record["transform"]["t"][2])


def batch_arrays(slices: list[SliceImage]) -> tuple[np.ndarray, np.ndarray]:
    images = np.stack([s.data for s in slices])
    poses = np.stack([s.pose.as_vector() for s in slices])
    return images, poses


def method_loss(method: str, model: Model, out, target, nig_lambda: float = 0.01, warmup: bool = False):
    """Training objective for ``method``.

    With ``warmup`` the GNLL methods fit the mean under a fixed variance of
    ``output_scale**2``. The variance heads meanwhile fit the residuals of the
    detached mean on detached features, so they track the error without
    steering the shared backbone.
    """
    if method == "planeinvol":
        return losses.mse(out.mean, target)
    if warmup and method != "edl":
        s = model.config.output_scale
        fixed = np.full(out.mean.shape, s * s, dtype=out.mean.data.dtype)
        _, var = model.variance_heads(Tensor(out.z.data))
        return losses.gnll(out.mean, fixed, target) + losses.gnll(Tensor(out.mean.data), var, target)
    if method == "edl":
        gamma, nu, alpha, beta = out.nig
        return losses.nig_loss(losses.NIGParams(gamma, nu, alpha, beta), target / model.config.output_scale, nig_lambda)
    return losses.gnll(out.mean, out.var, target)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    method: str
    models: list
    history: list
    config: TrainConfig
    paths: list = field(default_factory=list)

    @property
    def total_params(self) -> int:
        return sum(m.num_params() for m in self.models)


def _validation_set(cfg: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    vols = volumes_for(cfg, "val")
    slices = []
    for j, v in enumerate(vols):
        rng = np.random.default_rng([cfg.seed, 7919, j])
        slices += make_batch(v, cfg.val_size, cfg.augment, rng, cfg.resolution, workers=cfg.workers)
    return batch_arrays(slices)


def _noisy(target: np.ndarray, slices, cfg: TrainConfig, rng) -> np.ndarray:
    if cfg.label_noise == (0.0, 0.0) or cfg.label_noise == (0, 0):
        return target
    amp = label_noise_amplitude(np.array([slice_tz(s) for s in slices]), cfg)
    return target + amp[:, None] * rng.standard_normal(target.shape)


def train_single(cfg: TrainConfig, seed: int, val=None) -> tuple[Model, list]:
    mcfg = cfg.model_config()
    model = Model(mcfg, seed=seed)
    params = model.parameters()
    state = AdamState()
    vols = volumes_for(cfg, "train")
    val_x, val_p = val if val is not None else _validation_set(cfg)
    history = []
    best, best_state, stale = math.inf, model.state(), 0
    drop_rng = np.random.default_rng([seed, 31337])
    for epoch in range(cfg.epochs):
        warm = epoch < cfg.variance_warmup
        if epoch == cfg.variance_warmup and epoch > 0:
            # the objective changes here: restart best-model tracking, and start
            # Adam afresh since its moment estimates belong to the old gradient scale
            best, stale = math.inf, 0
            state = AdamState()
        model.training = True
        train_losses = []
        for j, v in enumerate(vols):
            batch_seed = [seed, epoch, j]
            rng = np.random.default_rng(batch_seed)
            slices = make_batch(v, cfg.batch_size, cfg.augment, rng, cfg.resolution, workers=cfg.workers)
            x, target = batch_arrays(slices)
            target = _noisy(target, slices, cfg, rng)
            model.zero_grad()
            out = model.forward(x, rng=drop_rng)
            loss = method_loss(cfg.method, model, out, target, cfg.nig_lambda, warm)
            if not np.isfinite(loss.item()):
                raise NumericError(
                    f"non-finite training loss at epoch {epoch}, volume {j}, batch seed {batch_seed}"
                )
            loss.backward()
            adam_step([p.data for p in params], [p.grad for p in params], state, lr=cfg.lr)
            train_losses.append(loss.item())
        model.training = False
        out = model.forward(val_x)
        val_loss = method_loss(cfg.method, model, out, val_p, cfg.nig_lambda, warm).item()
        pred = out.mean.data.astype(np.float64)
        row = {
            "epoch": epoch,
            "train_loss": float(np.mean(train_losses)),
            "val_loss": val_loss,
            "val_ED": float(np.mean(metrics.euclidean_distance(pred, val_p, normalize=True))),
            "val_PA": float(np.nanmean(_safe_pa(pred, val_p))),
        }
        history.append(row)
        log.info("seed %d epoch %d train %.4f val %.4f", seed, epoch, row["train_loss"], val_loss)
        if not np.isfinite(val_loss):
            raise NumericError(f"non-finite validation loss at epoch {epoch}")
        if val_loss < best:
            best, best_state, stale = val_loss, model.state(), 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    model.load_state(best_state)
    model.training = False
    return model, history


def member_seeds(cfg: TrainConfig) -> list[int]:
    k = cfg.members if cfg.method == "de" else 1
    return [cfg.seed + 1000 * i for i in range(k)]


def train(cfg: TrainConfig, out_dir=None) -> TrainResult:
    val = _validation_set(cfg) if cfg.epochs > 0 else (None, None)
    models, history = [], []
    for i, s in enumerate(member_seeds(cfg)):
        if cfg.epochs > 0:
            m, h = train_single(cfg, s, val)
        else:
            m, h = Model(cfg.model_config(), seed=s), []
        models.append(m)
        history += [{"member": i, **row} for row in h]
    result = TrainResult(cfg.method, models, history, cfg)
    if out_dir is not None:
        result.paths = write_training_outputs(result, out_dir)
    return result


def write_training_outputs(result: TrainResult, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = result.config
    names = []
    for i, m in enumerate(result.models):
        name = "model" if len(result.models) == 1 else f"member{i}"
        hist = [r for r in result.history if r["member"] == i]
        save_checkpoint(
            out_dir / name,
            m,
            method=cfg.method,
            epoch=len(hist),
            history=hist,
            train_config=cfg.to_dict(),
            validation="method loss on held-out phantom volumes, every epoch",
        )
        names.append(f"{name}.json")
    manifest = {
        "method": cfg.method,
        "members": names,
        "params": result.total_params,
        "train_config": cfg.to_dict(),
    }
    (out_dir / "ensemble.json").write_text(json.dumps(manifest, indent=2))
    write_log_csv(out_dir / "train_log.csv", result.history)
    return [out_dir / n for n in names] + [out_dir / "ensemble.json"]


def write_log_csv(path, history: list) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("member",) + LOG_COLUMNS)
        for r in history:
            w.writerow([r["member"], r["epoch"]] + [f"{r[c]:.6f}" for c in LOG_COLUMNS[1:]])


# ---------------------------------------------------------------------------
# predictors
# ---------------------------------------------------------------------------


@dataclass
class Predictor:
    """Method-aware inference over one model or a deep ensemble."""

    method: str
    models: list
    mc_passes: int = 5
    seed: int = 0

    @property
    def config(self) -> ModelConfig:
        return self.models[0].config

    @property
    def total_params(self) -> int:
        return sum(m.num_params() for m in self.models)

    def moments(self, images) -> tuple[np.ndarray, np.ndarray]:
        if self.method == "de":
            return de_predict(self.models, images)
        if self.method == "mcd":
            return mcd_predict(self.models[0], images, self.mc_passes, self.seed)
        return self.models[0].predict_moments(images)


def load_predictor(path, seed: int = 0) -> Predictor:
    """Load from a training output directory, its ``ensemble.json`` or a single model manifest."""
    path = Path(path)
    if path.is_dir():
        path = path / "ensemble.json"
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    meta = json.loads(path.read_text())
    if "members" in meta:
        models = [load_checkpoint(path.parent / n)[0] for n in meta["members"]]
        passes = meta["train_config"].get("mc_passes", 5)
        return Predictor(meta["method"], models, passes, seed)
    model, meta = load_checkpoint(path)
    return Predictor(meta.get("method", "qaerts"), [model], 5, seed)


def predictor_from_result(result: TrainResult, seed: int = 0) -> Predictor:
    return Predictor(result.method, result.models, result.config.mc_passes, seed)


def predict(predictor: Predictor, slices: list) -> list[dict]:
    """JSON-ready records: fused pose and variance, plus per-head poses."""
    if not slices:
        return []
    images = np.stack([np.asarray(getattr(s, "data", s), dtype=np.float64) for s in slices])
    size = predictor.config.in_size
    if images.shape[1:] != (size, size):
        raise ShapeError(f"slices are {images.shape[1:]}, the model expects {(size, size)}")
    mu, var = predictor.moments(images)
    per_head = predictor.models[0].predict(images) if predictor.method != "de" else None
    records = []
    for i in range(len(images)):
        rec = {"fused_pose": mu[i].tolist(), "fused_var": var[i].tolist(), "heads": {}}
        if per_head is not None:
            for name, hp in per_head[i].heads.items():
                rec["heads"][name] = {
                    "pose": hp.pose.as_vector().tolist(),
                    "variance": None if hp.variance is None else hp.variance.tolist(),
                }
        records.append(rec)
    return records


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def _safe_pa(pred, true) -> np.ndarray:
    pred = np.asarray(pred).reshape(-1, 9)
    true = np.asarray(true).reshape(-1, 9)
    out = np.full(len(pred), np.nan)
    for i in range(len(pred)):
        try:
            out[i] = metrics.plane_angle(pred[i], true[i])
        except InvalidInputError:
            pass
    return out


def test_set(cfg: TrainConfig, seed: int) -> list[tuple[int, SliceImage]]:
    """``n_per_volume`` augmented slices from every test volume, with volume index."""
    out = []
    for j, v in enumerate(volumes_for(cfg, "test")):
        rng = np.random.default_rng([seed, 104729, j])
        out += [(j, s) for s in make_batch(v, cfg.n_per_volume, cfg.augment, rng, cfg.resolution, workers=cfg.workers)]
    return out


def slice_metrics(vol: Volume, pred, true, resolution: int) -> dict:
    pred = np.asarray(pred, dtype=np.float64).reshape(9)
    true = np.asarray(true, dtype=np.float64).reshape(9)
    ed = float(metrics.euclidean_distance(pred, true))
    img_true = sample_pose(vol, true, GRID_HALF_EXTENT, resolution)
    img_pred = sample_pose(vol, pred, GRID_HALF_EXTENT, resolution)
    return {
        "ED": ed,
        "ED_norm": ed / GRID_HALF_EXTENT,
        "PA": float(_safe_pa(pred, true)[0]),
        "MSE": float(metrics.mse_points(pred, true)),
        "NCC": metrics.ncc(img_pred, img_true),
        "SSIM": metrics.ssim(img_pred, img_true),
    }


def evaluate_poses(cfg: TrainConfig, samples, preds, variances=None) -> list[dict]:
    vols = volumes_for(cfg, "test")
    rows = []
    for i, ((j, s), p) in enumerate(zip(samples, preds)):
        row = {"slice": i, "volume": j, **slice_metrics(vols[j], p, s.pose.as_vector(), cfg.metric_resolution)}
        row["mean_var"] = float(np.mean(variances[i])) if variances is not None else float("nan")
        rows.append(row)
    return rows


def summarize(method: str, rows: list[dict], params: int) -> dict:
    out = {"method": method}
    for c in METRIC_COLUMNS[1:-1]:
        vals = np.array([r[c] for r in rows], dtype=np.float64)
        if np.all(np.isnan(vals)):
            out[c] = (float("nan"), float("nan"))
        else:
            out[c] = (float(np.nanmean(vals)), float(np.nanstd(vals)))
    out["params"] = int(params)
    return out


def evaluate(predictors: list[Predictor], cfg: TrainConfig, seed: int = 0) -> tuple[list[dict], dict]:
    """Summary rows (mean, std per metric) and per-slice rows keyed by method."""
    samples = test_set(cfg, seed)
    images = np.stack([s.data for _, s in samples])
    summaries, per_slice = [], {}
    for pr in predictors:
        mu, var = pr.moments(images)
        has_var = pr.models[0].config.variance or pr.models[0].config.evidential or pr.method in ("de", "mcd")
        rows = evaluate_poses(cfg, samples, mu, var if has_var else None)
        per_slice[pr.method] = rows
        summaries.append(summarize(pr.method, rows, pr.total_params))
    return summaries, per_slice


def _fmt(x: float) -> str:
    return "nan" if not np.isfinite(x) else f"{x:.6f}"


def metrics_csv(summaries: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for s in summaries:
        cells = [s["method"]]
        for c in METRIC_COLUMNS[1:-1]:
            m, sd = s[c]
            cells.append(f"{_fmt(m)}±{_fmt(sd)}")
        cells.append(str(s["params"]))
        w.writerow(cells)
    return buf.getvalue()


def read_metrics_csv(path) -> list[dict]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for r in csv.DictReader(fh):
            out = {"method": r["method"], "params": int(r["params"])}
            for c in METRIC_COLUMNS[1:-1]:
                m, sd = r[c].split("±")
                out[c] = (float(m), float(sd))
            rows.append(out)
    return rows


def per_slice_csv(per_slice: dict) -> str:
    buf = io.StringIO()
    cols = ("method", "slice", "volume", "ED", "ED_norm", "PA", "MSE", "NCC", "SSIM", "mean_var")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for method, rows in per_slice.items():
        for r in rows:
            w.writerow([method, r["slice"], r["volume"]] + [_fmt(r[c]) for c in cols[3:]])
    return buf.getvalue()


def write_evaluation(out_dir, summaries, per_slice) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"metrics": out_dir / "metrics.csv", "per_slice": out_dir / "per_slice.csv"}
    paths["metrics"].write_text(metrics_csv(summaries), encoding="utf-8")
    paths["per_slice"].write_text(per_slice_csv(per_slice), encoding="utf-8")
    meta = {
        "ssim": {"window": metrics.SSIM_WINDOW, "k1": metrics.SSIM_K1, "k2": metrics.SSIM_K2, "data_range": 1.0},
        "ed_normalizer": GRID_HALF_EXTENT,
        "pa": "angle between oriented plane normals, radians",
    }
    paths["meta"] = out_dir / "metrics_meta.json"
    paths["meta"].write_text(json.dumps(meta, indent=2))
    return paths


def ground_truth_self_test(cfg: TrainConfig, seed: int = 0) -> dict:
    """Evaluate ground-truth poses as if they were predictions."""
    samples = test_set(cfg, seed)
    truth = np.stack([s.pose.as_vector() for _, s in samples])
    rows = evaluate_poses(cfg, samples, truth)
    return summarize("ground_truth", rows, 0)


def param_report(cfg: TrainConfig) -> dict:
    info = count_params(cfg.model_config())
    k = cfg.members if cfg.method == "de" else 1
    return {**info, "members": k, "predictor_total": k * info["total"]}


def replace_config(cfg: TrainConfig, **kw) -> TrainConfig:
    return replace(cfg, **kw)
