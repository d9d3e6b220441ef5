"""Command-line front end wiring the library into reproducible experiments.

Subcommands: fit knowledge spaces over a synthetic curriculum, dump anchors
from a snapshot, compute lifelong metrics from a success-rate CSV, train the
desk-scale decoder, run finite-difference gradient checks, and produce an
end-to-end lifelong-learning report.  Every command is deterministic under
its config seed; text and CSV outputs carry the config hash in a header
comment line.  Exit codes: 0 success, 2 environment/IO, 3 input validation,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import sys
from pathlib import Path

import numpy as np
import yaml

from .attention import (
    attention_backward,
    attention_forward,
    ffem_backward,
    ffem_forward,
    init_attention,
    init_enhancer,
    param_arrays,
    positional_encoding,
    tfem_backward,
    tfem_forward,
)
from .decoder import (
    decode,
    decode_backward,
    decode_forward,
    init_decoder,
    speed_loss_with_grad,
    traj_loss,
    traj_loss_with_grad,
    train_decoder,
)
from .engine import InferenceConfig
from .metrics import (
    SRMatrix,
    compute_report,
    format_percent,
    parse_sr_matrix,
    report_to_csv,
    report_to_text,
)
from .scenarios import default_archetypes, generate_task, make_default_curriculum, TaskSpec
from .spaces import anchor_drift, extract_anchors, load_snapshot, make_space, save_snapshot, update_space

EXIT_OK = 0
EXIT_ENV = 2
EXIT_INPUT = 3
EXIT_NUMERIC = 4

GRADCHECK_TOL = 1e-4


class ConfigError(ValueError):
    """Invalid run configuration."""


DEFAULT_CONFIG = {
    "seed": 0,
    "spaces": {
        "feature_dim": 16,
        "trajectory_dim": 20,
        "anchor_weight_floor": 0.0,
    },
    "inference": {
        "passes": 6,
        "birth_enabled": True,
        "birth_pool_min": 5,
        "birth_loglik_percentile": 50.0,
        "merge_enabled": True,
        "merge_candidate_count": 5,
        "prune_count_threshold": 0.0,
        "rng_seed": 0,
        "elbo_tol": 1e-6,
    },
    "decoder": {
        "tau": 1.0,
        "top_k": 1,
        "steps": 300,
        "learning_rate": 0.05,
        "max_train_per_task": 60,
        "holdout_fraction": 0.25,
    },
    "curriculum": {
        "profile": [184, 146, 92, 78, 11],
        "reverse": False,
        "waypoint_noise_sigma": 0.1,
        "feature_noise_sigma": 0.5,
    },
    "outputs": {
        "directory": "out",
    },
}


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

def _merge(defaults: dict, user: dict, path: str = "") -> dict:
    out = copy.deepcopy(defaults)
    for key, value in user.items():
        where = f"{path}.{key}" if path else str(key)
        if key not in defaults:
            raise ConfigError(f"unknown config key '{where}'")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config section '{where}' must be a mapping")
            out[key] = _merge(defaults[key], value, where)
        else:
            out[key] = value
    return out


def load_config(path: str | None, seed: int | None = None,
                out_dir: str | None = None) -> dict:
    """Resolve the run configuration: defaults overlaid by the YAML file,
    then by the --seed/--out command-line overrides."""
    user = {}
    if path is not None:
        try:
            doc = yaml.safe_load(Path(path).read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed config: {exc}") from exc
        if doc is not None:
            if not isinstance(doc, dict):
                raise ConfigError("config document must be a mapping")
            user = doc
    cfg = _merge(DEFAULT_CONFIG, user)
    if seed is not None:
        cfg["seed"] = int(seed)
    if out_dir is not None:
        cfg["outputs"]["directory"] = str(out_dir)
    if cfg["spaces"]["trajectory_dim"] % 2 != 0:
        raise ConfigError("spaces.trajectory_dim must be even")
    if not (0.0 < cfg["decoder"]["holdout_fraction"] < 1.0):
        raise ConfigError("decoder.holdout_fraction must be in (0, 1)")
    return cfg


def config_hash(cfg: dict) -> str:
    """Hash of the semantic configuration (output location excluded, so the
    same experiment written elsewhere produces identical file contents)."""
    semantic = {k: v for k, v in cfg.items() if k != "outputs"}
    blob = json.dumps(semantic, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def _header(cfg: dict) -> str:
    return f"# config: {config_hash(cfg)}\n"


def _out_dir(cfg: dict) -> Path:
    d = Path(cfg["outputs"]["directory"])
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write_csv(path: Path, cfg: dict, rows) -> None:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    path.write_text(_header(cfg) + buf.getvalue())


def _fmt(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# Shared pipeline pieces
# ---------------------------------------------------------------------------

def _inference_config(cfg: dict) -> InferenceConfig:
    return InferenceConfig(**cfg["inference"])


def _curriculum(cfg: dict) -> list[TaskSpec]:
    c = cfg["curriculum"]
    specs = make_default_curriculum(volume_profile=tuple(c["profile"]),
                                    feature_dim=cfg["spaces"]["feature_dim"],
                                    seed=cfg["seed"], reverse=bool(c["reverse"]))
    # apply configured noise levels to every archetype
    from dataclasses import replace as _replace
    out = []
    for spec in specs:
        archs = tuple(
            (_replace(a, waypoint_noise_sigma=float(c["waypoint_noise_sigma"]),
                      feature_noise_sigma=float(c["feature_noise_sigma"])), n)
            for a, n in spec.archetypes)
        out.append(TaskSpec(spec.task_id, archs, spec.seed))
    return out


def _split(n: int, fraction: float, seed: int):
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_test = max(1, int(round(fraction * n)))
    return perm[n_test:], perm[:n_test]


def feature_rows(feature: np.ndarray) -> np.ndarray:
    """Desk-scale trajectory-feature stand-in: the sample's fused feature
    plus one fixed positional reference row, giving a two-key attention set."""
    feature = np.asarray(feature, dtype=float)
    ref = positional_encoding(2, feature.shape[0])[1]
    return np.vstack([feature, ref])


def _evaluate(anchors: np.ndarray, params, feats, trajs,
              ade_threshold: float = 1.0):
    """Held-out evaluation: anchor-selection accuracy, mean ADE (meters),
    and the success rate (correct selection AND ADE <= threshold)."""
    correct, success, ades = 0, 0, []
    for f, y in zip(feats, trajs):
        out = decode(anchors, feature_rows(f), params)
        true_k = int(np.argmin(np.linalg.norm(anchors - y, axis=1)))
        ok = int(np.argmax(out.probs)) == true_k
        ade = float(np.linalg.norm(
            out.selected.reshape(-1, 2) - y.reshape(-1, 2), axis=1).mean())
        correct += ok
        success += ok and ade <= ade_threshold
        ades.append(ade)
    n = len(ades)
    return correct / n, float(np.mean(ades)), 100.0 * success / n


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_fit(args) -> int:
    cfg = load_config(args.config, args.seed, args.out)
    out = _out_dir(cfg)
    inference = _inference_config(cfg)
    fks = make_space("feature", cfg["spaces"]["feature_dim"],
                     anchor_weight_floor=cfg["spaces"]["anchor_weight_floor"])
    tks = make_space("trajectory", cfg["spaces"]["trajectory_dim"],
                     anchor_weight_floor=cfg["spaces"]["anchor_weight_floor"])
    growth = [("task", "fks_components", "tks_components",
               "fks_births", "tks_births", "fks_merges", "tks_merges")]
    drift_rows = [("task", "created_task", "distance", "removed")]
    prev_anchors = None
    for spec in _curriculum(cfg):
        trajs, feats, _ = generate_task(spec)
        fks, frep = update_space(fks, [(f"task{spec.task_id}", feats)],
                                 inference, spec.task_id)
        tks, trep = update_space(tks, [(f"task{spec.task_id}", trajs)],
                                 inference, spec.task_id)
        save_snapshot(fks, out / f"fks_task{spec.task_id}.json")
        save_snapshot(tks, out / f"tks_task{spec.task_id}.json")
        growth.append((spec.task_id, fks.state.n_components,
                       tks.state.n_components, frep.births_accepted,
                       trep.births_accepted, frep.merges_accepted,
                       trep.merges_accepted))
        anchors = extract_anchors(tks)
        if prev_anchors is not None:
            for entry in anchor_drift(prev_anchors, anchors):
                drift_rows.append((spec.task_id, entry.created_task,
                                   "" if entry.distance is None
                                   else _fmt(entry.distance),
                                   int(entry.removed)))
        prev_anchors = anchors
    _write_csv(out / "k_growth.csv", cfg, growth)
    _write_csv(out / "anchor_drift.csv", cfg, drift_rows)
    print(f"fit complete: outputs in {out}")
    return EXIT_OK


def cmd_anchors(args) -> int:
    cfg = load_config(args.config, args.seed, args.out)
    out = _out_dir(cfg)
    space = load_snapshot(args.snapshot)
    aset = extract_anchors(space)
    dim = aset.anchors.shape[1]
    rows = [("created_task", "weight") + tuple(f"x{i}" for i in range(dim))]
    for task, weight, row in zip(aset.created_task, aset.weights, aset.anchors):
        rows.append((int(task), _fmt(weight)) + tuple(_fmt(v) for v in row))
    path = out / "anchors.csv"
    _write_csv(path, cfg, rows)
    print(f"{len(aset.weights)} anchors written to {path}")
    return EXIT_OK


def cmd_metrics(args) -> int:
    cfg = load_config(args.config, args.seed, args.out)
    out = _out_dir(cfg)
    matrix = parse_sr_matrix(args.matrix)
    report = compute_report(matrix, strict=not args.permissive)
    text = _header(cfg) + report_to_text(report)
    (out / "metrics.txt").write_text(text)
    (out / "metrics.csv").write_text(_header(cfg) + report_to_csv(report))
    print(text, end="")
    return EXIT_OK


def _three_archetype_task(cfg: dict) -> TaskSpec:
    archs = default_archetypes(feature_dim=cfg["spaces"]["feature_dim"])[:3]
    return TaskSpec(1, tuple((a, 40) for a in archs), seed=cfg["seed"] + 17)


def cmd_train_decoder(args) -> int:
    cfg = load_config(args.config, args.seed, args.out)
    out = _out_dir(cfg)
    dcfg = cfg["decoder"]
    spec = _three_archetype_task(cfg)
    trajs, feats, labels = generate_task(spec)
    train_idx, test_idx = _split(len(labels), dcfg["holdout_fraction"],
                                 cfg["seed"] + 101)

    if args.snapshot is not None:
        tks = load_snapshot(args.snapshot)
    else:
        tks = make_space("trajectory", cfg["spaces"]["trajectory_dim"])
        tks, _ = update_space(tks, [("train", trajs[train_idx])],
                              _inference_config(cfg), task_id=1)
    anchors = extract_anchors(tks).anchors

    params = init_decoder(cfg["spaces"]["feature_dim"], seed=cfg["seed"],
                          tau=dcfg["tau"], top_k=dcfg["top_k"],
                          n_speed_classes=max(3, len(cfg["curriculum"]["profile"])))
    dataset = [(feature_rows(feats[i]), trajs[i], int(labels[i]))
               for i in train_idx[: dcfg["max_train_per_task"] * 3]]
    params, trace = train_decoder(dataset, anchors, params,
                                  steps=dcfg["steps"],
                                  learning_rate=dcfg["learning_rate"])
    rows = [("step", "l_prob", "l_best", "l_weighted", "l_speed", "total")]
    rows += [(i, _fmt(t.l_prob), _fmt(t.l_best), _fmt(t.l_weighted),
              _fmt(t.l_speed), _fmt(t.total)) for i, t in enumerate(trace)]
    _write_csv(out / "loss_trace.csv", cfg, rows)

    accuracy, ade, _ = _evaluate(anchors, params, feats[test_idx],
                                 trajs[test_idx])
    text = (_header(cfg)
            + f"anchors                  {anchors.shape[0]}\n"
            f"final_total_loss         {_fmt(trace[-1].total)}\n"
            f"selection_accuracy       {format_percent(100.0 * accuracy)}\n"
            f"ade_meters               {_fmt(ade)}\n")
    (out / "decoder_eval.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Gradient checks
# ---------------------------------------------------------------------------

def _numgrad(f, x, step=1e-5):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + step
        hi = f()
        x[idx] = orig - step
        lo = f()
        x[idx] = orig
        g[idx] = (hi - lo) / (2 * step)
        it.iternext()
    return g


def _relerr(a, b):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b))
                 / max(1e-6, na, nb))


def run_gradchecks(seed: int, corrupt: bool = False):
    """Finite-difference checks of every analytic gradient path.

    Returns (name, max relative error, passed) per check.  The corrupt hook
    scales one analytic gradient so the reporting path can be exercised.
    """
    h = 6
    rng = np.random.default_rng(seed)
    results = []

    def check(name, analytic_list, arrays, f):
        errs = []
        for g, arr in zip(analytic_list, arrays):
            errs.append(_relerr(g, _numgrad(f, arr)))
        err = max(errs)
        results.append((name, err, err <= GRADCHECK_TOL))

    # plain attention: loss = sum(R * out)
    p = init_attention(h, rng)
    q_in = rng.normal(size=(3, h))
    k_in = rng.normal(size=(4, h))
    v_in = rng.normal(size=(4, h))
    r = rng.normal(size=(3, h))
    out, cache = attention_forward(q_in, k_in, v_in, p)
    dq, dk, dv, gp = attention_backward(cache, r)
    if corrupt:
        dq = dq * 1.01
    check("attention", [dq, dk, dv] + param_arrays(gp),
          [q_in, k_in, v_in] + param_arrays(p),
          lambda: float((r * attention_forward(q_in, k_in, v_in, p)[0]).sum()))

    # FFEM enhancer block
    ep = init_enhancer(h, proj_in=5, seed=seed + 1)
    f_fused = rng.normal(size=(4, h))
    anchors = rng.normal(size=(3, 5))
    r2 = rng.normal(size=(4, h))

    def ffem_loss():
        return float((r2 * ffem_forward(f_fused, anchors, ep)[0]).sum())

    _, _, _, fc = ffem_forward(f_fused, anchors, ep)
    d_in, d_anch, g_enh = ffem_backward(fc, r2)
    check("ffem", [d_in, d_anch] + param_arrays(g_enh),
          [f_fused, anchors] + param_arrays(ep), ffem_loss)

    # TFEM enhancer block
    tp = init_enhancer(h, proj_in=2, seed=seed + 2)
    f_traj = rng.normal(size=(3, h))
    tanchors = rng.normal(size=(2, 20))
    r3 = rng.normal(size=(3, h))

    def tfem_loss():
        return float((r3 * tfem_forward(f_traj, tanchors, tp)[0]).sum())

    _, tc = tfem_forward(f_traj, tanchors, tp)
    d_in, d_anch, g_t = tfem_backward(tc, r3)
    check("tfem", [d_in, d_anch] + param_arrays(g_t),
          [f_traj, tanchors] + param_arrays(tp), tfem_loss)

    # decoder end to end: trajectory loss + speed loss
    dp = init_decoder(h, seed=seed + 3, tau=0.8, n_speed_classes=3)
    danchors = rng.normal(size=(3, 20))
    f_keys = rng.normal(size=(4, h))
    y = rng.normal(size=20)

    def dec_loss():
        o = decode(danchors, f_keys, dp)
        f_speed = f_keys.mean(axis=0, keepdims=True)
        return (traj_loss(o, y, dp.tau).l_traj
                + speed_loss_with_grad(f_speed, dp.speed_head, 1)[0])

    o, dc = decode_forward(danchors, f_keys, dp)
    _, d_trajs, d_logits = traj_loss_with_grad(o, y, dp.tau)
    d_fk, d_an, g_dec = decode_backward(dc, d_trajs, d_logits)
    f_speed = f_keys.mean(axis=0, keepdims=True)
    _, d_fs, g_speed = speed_loss_with_grad(f_speed, dp.speed_head, 1)
    g_dec.speed_head = g_speed
    d_fk = d_fk + d_fs / f_keys.shape[0]
    check("decoder", [d_fk, d_an] + param_arrays(g_dec),
          [f_keys, danchors] + param_arrays(dp), dec_loss)

    return results


def cmd_gradcheck(args) -> int:
    cfg = load_config(args.config, args.seed, args.out)
    out = _out_dir(cfg)
    results = run_gradchecks(cfg["seed"])
    rows = [("check", "max_rel_err", "status")]
    rows += [(name, f"{err:.3e}", "pass" if ok else "FAIL")
             for name, err, ok in results]
    _write_csv(out / "gradcheck.csv", cfg, rows)
    width = max(len(r[0]) for r in rows)
    print(_header(cfg), end="")
    for name, err, status in rows[1:]:
        print(f"{name:<{width}}  {err:>10}  {status}")
    if not all(ok for _, _, ok in results):
        print("gradient check FAILED", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


# ---------------------------------------------------------------------------
# Lifelong report
# ---------------------------------------------------------------------------

def cmd_lifelong_report(args) -> int:
    cfg = load_config(args.config, args.seed, args.out)
    out = _out_dir(cfg)
    dcfg = cfg["decoder"]
    specs = _curriculum(cfg)
    tasks = []
    for spec in specs:
        trajs, feats, _ = generate_task(spec)
        tr, te = _split(len(trajs), dcfg["holdout_fraction"],
                        cfg["seed"] * 31 + spec.task_id)
        tasks.append((spec, trajs, feats, tr, te))

    inference = _inference_config(cfg)
    tks = make_space("trajectory", cfg["spaces"]["trajectory_dim"],
                     anchor_weight_floor=cfg["spaces"]["anchor_weight_floor"])
    fks = make_space("feature", cfg["spaces"]["feature_dim"],
                     anchor_weight_floor=cfg["spaces"]["anchor_weight_floor"])
    params = init_decoder(cfg["spaces"]["feature_dim"], seed=cfg["seed"],
                          tau=dcfg["tau"], top_k=dcfg["top_k"],
                          n_speed_classes=max(2, len(specs)))
    n = len(specs)
    sr = np.zeros((n, n))
    k_trace = [("task", "tks_components", "fks_components")]
    for t, (spec, trajs, feats, tr, te) in enumerate(tasks):
        tks, _ = update_space(tks, [(f"task{spec.task_id}", trajs[tr])],
                              inference, spec.task_id)
        fks, _ = update_space(fks, [(f"task{spec.task_id}", feats[tr])],
                              inference, spec.task_id)
        anchors = extract_anchors(tks).anchors
        chosen = tr[: dcfg["max_train_per_task"]]
        dataset = [(feature_rows(feats[i]), trajs[i], t) for i in chosen]
        params, _ = train_decoder(dataset, anchors, params,
                                  steps=dcfg["steps"],
                                  learning_rate=dcfg["learning_rate"])
        for j, (_, jtrajs, jfeats, _, jte) in enumerate(tasks):
            _, _, success = _evaluate(anchors, params, jfeats[jte],
                                      jtrajs[jte])
            sr[t, j] = success
        k_trace.append((spec.task_id, tks.state.n_components,
                        fks.state.n_components))

    names = tuple(s.archetypes[0][0].name for s in specs)
    labels = tuple(f"after_task_{s.task_id}" for s in specs)
    matrix = SRMatrix(sr, names, labels)
    report = compute_report(matrix, strict=False)

    rows = [("snapshot",) + names]
    rows += [(labels[i],) + tuple(_fmt(v) for v in sr[i]) for i in range(n)]
    _write_csv(out / "sr_matrix.csv", cfg, rows)
    _write_csv(out / "k_growth.csv", cfg, k_trace)
    plot = [("snapshot", "mean_success_rate")]
    plot += [(labels[i], _fmt(sr[i].mean())) for i in range(n)]
    _write_csv(out / "plot_data.csv", cfg, plot)
    text = _header(cfg) + report_to_text(report)
    (out / "lifelong_metrics.txt").write_text(text)
    (out / "lifelong_metrics.csv").write_text(_header(cfg)
                                              + report_to_csv(report))
    print(text, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def _add_common(sp):
    sp.add_argument("--config", default=None, help="YAML run configuration")
    sp.add_argument("--seed", type=int, default=None, help="seed override")
    sp.add_argument("--out", default=None, help="output directory override")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="knowspace",
        description="streaming knowledge spaces, causal enhancement, and a "
                    "desk-scale lifelong-learning pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("fit", help="fit knowledge spaces over the curriculum")
    _add_common(sp)
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("anchors", help="dump anchors from a snapshot")
    sp.add_argument("snapshot", help="knowledge-space snapshot (JSON)")
    _add_common(sp)
    sp.set_defaults(func=cmd_anchors)

    sp = sub.add_parser("metrics", help="lifelong metrics from an SR matrix")
    sp.add_argument("matrix", help="success-rate matrix CSV")
    sp.add_argument("--permissive", action="store_true",
                    help="record zero-denominator terms instead of failing")
    _add_common(sp)
    sp.set_defaults(func=cmd_metrics)

    sp = sub.add_parser("train-decoder", help="train the desk-scale decoder")
    sp.add_argument("--snapshot", default=None,
                    help="trajectory-space snapshot supplying the anchors")
    _add_common(sp)
    sp.set_defaults(func=cmd_train_decoder)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    _add_common(sp)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("lifelong-report",
                        help="end-to-end lifelong learning experiment")
    _add_common(sp)
    sp.set_defaults(func=cmd_lifelong_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"environment error: {exc}", file=sys.stderr)
        return EXIT_ENV
    except ValueError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
