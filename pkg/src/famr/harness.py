"""Config-driven experiment pipeline: train, forget, verify, report.

A config is one JSON document with the blocks ``dataset``, ``model``,
``train``, ``forget``, ``theory`` and ``output``. Key names are fixed and
unknown keys are rejected; see README.md for the full list.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__, io, metrics, nn, theory
from .data import Dataset, ForgetSpec, draw_like, generate, split_forget
from .losses import LossWeights, NetworkForgetLoss, StyleTarget, style_target_from_set
from .optim import TRACE_FIELDS, FamrConfig, famr_run

log = logging.getLogger(__name__)

CODE_VERSION = f"famr {__version__}"

TRACE_COLUMNS = list(TRACE_FIELDS) + ["for_acc", "ret_acc", "entropy_forget", "kl_pre_post"]

SCHEMA = {
    "dataset": {"generator": None, "args": None},
    "model": {"layer_widths": None, "activation": "relu", "phi_layer_index": 0, "bias": True},
    "train": {"epochs": 50, "lr": 0.1, "seed": 0, "batch_size": 32, "l2": 0.0},
    "forget": {
        "spec": None,
        "lam": 0.1,
        "eta": 1e-4,
        "iters": 10,
        "alpha": 1.0,
        "beta": 0.0,
        "batch_size": None,
        "seed": 0,
        "residual_tol": None,
        "style_target": "retain_mean",
        "kl_direction": "pre_post",
    },
    "theory": {
        "enabled": False,
        "lambda_grid": [1.0, 0.1, 0.01, 0.001],
        "probe_draws": 100,
        "probe_seed": 0,
        "hessian_source": "finite_difference",
        "output_norm": "logits",
        "retrain_tol": 1e-7,
    },
    "output": {"dir": "runs/default", "record_every": 1},
}
REQUIRED = {("dataset", "generator"), ("dataset", "args"), ("model", "layer_widths"), ("forget", "spec")}
FORGET_SPEC_KEYS = {"kind", "sample_indices", "class_id", "style_tag"}

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


class ConfigError(ValueError):
    def __init__(self, msg, line=None, path=None):
        self.line = line
        self.path = path
        loc = f"{path or '<config>'}:{line}: " if line else f"{path or '<config>'}: "
        super().__init__(loc + msg)


def _line_of(text: str, keys) -> int | None:
    pos, found = 0, None
    for k in keys:
        i = text.find(f'"{k}"', pos)
        if i < 0:
            break
        pos = found = i
    return None if found is None else text.count("\n", 0, found) + 1


@dataclass
class Experiment:
    raw: dict
    text: str
    path: str
    data: Dataset
    spec: nn.ModelSpec
    train: nn.TrainConfig
    forget_spec: ForgetSpec
    famr: FamrConfig
    style_target: str
    theory: dict
    out_dir: Path
    kl_direction: str = "pre_post"

    @property
    def config_hash(self) -> str:
        body = {k: v for k, v in self.raw.items() if k != "output"}
        return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()

    def provenance(self) -> dict:
        return {
            "config_sha256": self.config_hash,
            "dataset_sha256": self.data.digest(),
            "code_version": CODE_VERSION,
        }

    def provenance_line(self) -> str:
        return " ".join(f"{k}={v}" for k, v in self.provenance().items())


def load_config(path, seed_override: int | None = None, out_dir=None) -> Experiment:
    """Parse and validate a config file, raising ConfigError with a line anchor."""
    path = str(path)
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config: {e}", path=path) from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"malformed JSON: {e.msg} (column {e.colno})", e.lineno, path) from None
    if not isinstance(raw, dict):
        raise ConfigError("top level must be an object", 1, path)

    def fail(msg, *keys):
        raise ConfigError(msg, _line_of(text, keys), path)

    for block in raw:
        if block not in SCHEMA:
            fail(f"unknown block {block!r}", block)
    cfg = {}
    for block, defaults in SCHEMA.items():
        given = raw.get(block, {})
        if not isinstance(given, dict):
            fail(f"block {block!r} must be an object", block)
        for k in given:
            if k not in defaults:
                fail(f"unknown key {block}.{k}", block, k)
        merged = dict(defaults)
        merged.update(given)
        cfg[block] = merged
    for block, key in REQUIRED:
        if cfg[block][key] is None:
            fail(f"missing required key {block}.{key}", block)
    if seed_override is not None:
        cfg["train"]["seed"] = seed_override
        cfg["forget"]["seed"] = seed_override
        cfg["theory"]["probe_seed"] = seed_override
    if out_dir is not None:
        cfg["output"]["dir"] = str(out_dir)

    ds = cfg["dataset"]
    try:
        data = generate(ds["generator"], **ds["args"])
    except (TypeError, ValueError) as e:
        fail(f"dataset: {e}", "dataset")

    m = cfg["model"]
    try:
        spec = nn.ModelSpec(tuple(m["layer_widths"]), m["activation"], m["phi_layer_index"], m["bias"])
    except (TypeError, ValueError) as e:
        fail(f"model: {e}", "model")
    if spec.num_classes != data.num_classes:
        fail(f"model has {spec.num_classes} outputs but dataset has {data.num_classes} classes",
             "model", "layer_widths")
    if spec.input_dim != data.dim:
        fail(f"model input width {spec.input_dim} does not match data dimension {data.dim}",
             "model", "layer_widths")

    try:
        train = nn.TrainConfig(**cfg["train"])
    except (TypeError, ValueError) as e:
        fail(f"train: {e}", "train")

    f = cfg["forget"]
    fs = f["spec"]
    if not isinstance(fs, dict):
        fail("forget.spec must be an object", "forget", "spec")
    for k in fs:
        if k not in FORGET_SPEC_KEYS:
            fail(f"unknown key forget.spec.{k}", "forget", "spec", k)
    try:
        forget_spec = ForgetSpec(**fs)
        split_forget(data, forget_spec)
    except (TypeError, ValueError) as e:
        fail(f"forget.spec: {e}", "forget", "spec")
    if f["style_target"] not in ("retain_mean", "zero"):
        fail("forget.style_target must be 'retain_mean' or 'zero'", "forget", "style_target")
    if f["kl_direction"] not in ("pre_post", "post_pre"):
        fail("forget.kl_direction must be 'pre_post' or 'post_pre'", "forget", "kl_direction")
    if f["beta"] and spec.phi_dim == 0:
        fail("forget.beta > 0 needs a model with a hidden phi layer", "forget", "beta")
    try:
        famr = FamrConfig(
            lam=f["lam"], eta=f["eta"], iters=f["iters"],
            weights=LossWeights(f["alpha"], f["beta"]),
            batch_size=f["batch_size"], seed=f["seed"],
            record_every=cfg["output"]["record_every"], residual_tol=f["residual_tol"],
        )
    except (TypeError, ValueError) as e:
        fail(f"forget: {e}", "forget")

    th = cfg["theory"]
    if th["hessian_source"] not in ("finite_difference", "analytic_logistic"):
        fail("theory.hessian_source must be 'finite_difference' or 'analytic_logistic'",
             "theory", "hessian_source")
    if th["output_norm"] not in ("logits", "probs"):
        fail("theory.output_norm must be 'logits' or 'probs'", "theory", "output_norm")
    if not th["lambda_grid"] or any(not isinstance(v, (int, float)) or v <= 0 for v in th["lambda_grid"]):
        fail("theory.lambda_grid must be a nonempty list of positive numbers", "theory", "lambda_grid")

    return Experiment(raw=cfg, text=text, path=path, data=data, spec=spec, train=train,
                      forget_spec=forget_spec, famr=famr, style_target=f["style_target"],
                      theory=th, out_dir=Path(cfg["output"]["dir"]),
                      kl_direction=f["kl_direction"])


def _check_ckpt(exp: Experiment, spec: nn.ModelSpec, path):
    if spec != exp.spec:
        raise ConfigError(f"checkpoint {path} was written for a different model spec", path=exp.path)


def _style_target(exp, theta0, retain):
    if exp.famr.weights.beta == 0:
        return None
    if exp.style_target == "zero":
        return StyleTarget.zeros(exp.spec.phi_dim)
    return style_target_from_set(theta0, exp.spec, retain.inputs)


# ---------------------------------------------------------------------------
# commands


def cmd_train(exp: Experiment) -> dict:
    """Train the baseline model; writes theta0.ckpt.json, baseline_metrics.json and dataset.csv."""
    exp.out_dir.mkdir(parents=True, exist_ok=True)
    io.write_dataset(exp.out_dir / "dataset.csv", exp.data)
    theta0 = nn.train_baseline(exp.data, exp.spec, exp.train)
    io.save_checkpoint(exp.out_dir / "theta0.ckpt.json", theta0, exp.spec, exp.train.seed,
                       exp.provenance())
    forget, retain = split_forget(exp.data, exp.forget_spec)
    report = metrics.assemble_report(theta0, theta0, exp.spec, retain, forget)
    doc = {"kind": "baseline", "provenance": exp.provenance(), "metrics": report.to_dict()}
    io.write_json(exp.out_dir / "baseline_metrics.json", doc)
    return doc


def cmd_forget(exp: Experiment, checkpoint) -> dict:
    """Run anchored forgetting from a baseline checkpoint.

    Writes theta_star.ckpt.json, trace.csv and forget_metrics.json.
    """
    theta0, spec, _ = io.load_checkpoint(checkpoint)
    _check_ckpt(exp, spec, checkpoint)
    exp.out_dir.mkdir(parents=True, exist_ok=True)
    forget, retain = split_forget(exp.data, exp.forget_spec)
    target = _style_target(exp, theta0, retain)
    loss = NetworkForgetLoss(spec, forget.inputs, exp.famr.weights, target)

    def extras(step, theta):
        return {
            "for_acc": metrics.accuracy(theta, spec, forget),
            "ret_acc": metrics.accuracy(theta, spec, retain),
            "entropy_forget": metrics.mean_entropy(theta, spec, forget),
            "kl_pre_post": metrics.kl_pre_post(theta0, theta, spec, forget, exp.kl_direction),
        }

    theta_star, trace = famr_run(theta0, loss, exp.famr, on_record=extras)
    io.save_checkpoint(exp.out_dir / "theta_star.ckpt.json", theta_star, spec, exp.famr.seed,
                       exp.provenance())
    io.write_csv(exp.out_dir / "trace.csv", trace.rows, TRACE_COLUMNS, exp.provenance_line())
    report = metrics.assemble_report(theta0, theta_star, spec, retain, forget,
                                     kl_direction=exp.kl_direction)
    doc = {
        "kind": "forget",
        "provenance": exp.provenance(),
        "forget_spec": exp.forget_spec.to_dict(),
        "metrics": report.to_dict(),
        "style_loss_theta0": loss.value(theta0.values) if target is not None else None,
        "style_loss_final": loss.value(theta_star.values) if target is not None else None,
        "style_target": target.gram if target is not None else None,
    }
    io.write_json(exp.out_dir / "forget_metrics.json", doc)
    return doc


def probe_inputs(exp: Experiment, forget: Dataset) -> np.ndarray:
    draws = draw_like(exp.data, exp.theory["probe_draws"], exp.theory["probe_seed"])
    return np.vstack([forget.inputs, draws])


def cmd_verify(exp: Experiment, theta0_ckpt, theta_star_ckpt=None, lambda_grid=None) -> dict:
    """Retrain on the retain set and check every bound over the lambda grid.

    Writes w_star.ckpt.json and bounds.json (one BoundReport per grid point,
    plus one for the supplied FAMR checkpoint).
    """
    if not exp.theory["enabled"]:
        raise ConfigError("theory block is disabled (set theory.enabled = true)",
                          _line_of(exp.text, ["theory", "enabled"]), exp.path)
    theta0, spec, _ = io.load_checkpoint(theta0_ckpt)
    _check_ckpt(exp, spec, theta0_ckpt)
    if spec.n_params > theory.MAX_DENSE_PARAMS:
        raise ConfigError(
            f"model has {spec.n_params} parameters, above the dense Hessian limit of "
            f"{theory.MAX_DENSE_PARAMS}", _line_of(exp.text, ["model", "layer_widths"]), exp.path)
    exp.out_dir.mkdir(parents=True, exist_ok=True)
    grid = list(lambda_grid or exp.theory["lambda_grid"])
    forget, retain = split_forget(exp.data, exp.forget_spec)
    l2 = exp.train.l2

    w_star = theory.retrain_oracle(retain, spec, exp.train, tol=exp.theory["retrain_tol"])
    io.save_checkpoint(exp.out_dir / "w_star.ckpt.json", w_star, spec, exp.train.seed, exp.provenance())
    H, g = theory.removal_system(theta0, spec, retain, l2, exp.theory["hessian_source"])
    probes = probe_inputs(exp, forget)
    out = exp.theory["output_norm"]
    influence = None
    if H.lambda_min > 1e-8:
        infl = theory.influence_update(theta0, H, g)
        influence = {
            "distance_to_w_star": float(np.linalg.norm(infl - w_star.values)),
            "distance_to_theta0": float(np.linalg.norm(infl - theta0.values)),
        }
    rows = []
    for lam in grid:
        th = theory.damped_newton_solution(theta0, H, lam, g)
        rep = theory.verify_bounds(th, w_star, spec, H, lam, g, probes, forget.inputs, out)
        if not rep.holds_param:
            # the gap bound is exact only for quadratic losses
            log.warning("gap bound exceeded at lam=%g: %.3g > %.3g", lam, rep.param_gap, rep.gap_bound)
        row = rep.to_dict()
        row["newton_distance_to_theta0"] = float(np.linalg.norm(th - theta0.values))
        if influence is not None:
            row["newton_distance_to_influence"] = float(np.linalg.norm(th - infl))
        rows.append(row)
    famr_report = None
    if theta_star_ckpt is not None:
        theta_star, spec2, _ = io.load_checkpoint(theta_star_ckpt)
        _check_ckpt(exp, spec2, theta_star_ckpt)
        famr_report = theory.verify_bounds(theta_star, w_star, spec, H, exp.famr.lam, g, probes,
                                           forget.inputs, out).to_dict()
    doc = {
        "kind": "verify",
        "provenance": exp.provenance(),
        "param_check": "soft",
        "hessian_source": H.source,
        "lambda_min": H.lambda_min,
        "retain_grad_norm_at_theta0": float(np.linalg.norm(g)),
        "n_probes": int(probes.shape[0]),
        "influence": influence,
        "grid": rows,
        "famr": famr_report,
    }
    io.write_json(exp.out_dir / "bounds.json", doc)
    return doc


def _pct(x) -> str:
    return f"{100.0 * float(x):.1f}"


def cmd_report(result_dir, out_dir=None) -> dict:
    """Collect every run under ``result_dir`` into report.csv / report.json.

    A run is a directory holding baseline or forget outputs; those without
    forget_metrics.json are listed as skipped. Each trace.csv also gets a
    ``<run>.plot.csv`` with the per-step curves.
    """
    root = Path(result_dir)
    if not root.is_dir():
        raise ConfigError(f"{root} is not a directory")
    out = Path(out_dir) if out_dir else root
    markers = ("forget_metrics.json", "baseline_metrics.json", "theta0.ckpt.json", "trace.csv")
    run_dirs = sorted({p.parent for m in markers for p in root.rglob(m)})
    if not run_dirs:
        raise ConfigError(f"no result documents under {root}")
    rows, skipped = [], []
    out.mkdir(parents=True, exist_ok=True)
    for d in run_dirs:
        name = d.relative_to(root).as_posix() or "."
        mpath = d / "forget_metrics.json"
        if not mpath.exists():
            skipped.append({"run": name, "reason": "no forget_metrics.json"})
            continue
        try:
            m = io.read_json(mpath)["metrics"]
        except (ValueError, KeyError) as e:
            skipped.append({"run": name, "reason": f"unreadable metrics: {e}"})
            continue
        rows.append({
            "run": name,
            "ret_acc_pct": _pct(m["ret_acc"]),
            "for_acc_pct": _pct(m["for_acc"]),
            "ce": m["ce_forget"],
            "ent": m["entropy_forget"],
            "kl": m["kl_pre_post"],
            "ret_acc": m["ret_acc"],
            "for_acc": m["for_acc"],
        })
        tpath = d / "trace.csv"
        if tpath.exists():
            trace = io.read_csv(tpath)
            cols = ["step", "for_acc", "ret_acc", "entropy_forget", "kl_pre_post", "forget_loss"]
            plot = [{k: r[k] for k in cols} for r in trace]
            safe = "run" if name == "." else name.replace("/", "__")
            io.write_csv(out / f"{safe}.plot.csv", plot, cols)
    fields = ["run", "ret_acc_pct", "for_acc_pct", "ce", "ent", "kl", "ret_acc", "for_acc"]
    io.write_csv(out / "report.csv", rows, fields)
    doc = {"code_version": CODE_VERSION, "rows": rows, "skipped": skipped}
    io.write_json(out / "report.json", doc)
    return doc
