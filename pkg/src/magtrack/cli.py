"""``magtrack`` command line: data generation, training, evaluation, tracking, timing."""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from . import evaluation as ev
from .config import ExperimentConfig
from .dataset import DataGenerator, export_csv, write_dataset
from .errors import ConfigError, ContractError, DivergenceError, DomainError
from .field_models import equivalent_dipole_moment
from .mlp import load_model, new_model_for, predict_pose, save_model, train
from .opt_tracker import perturb_pose, track_trajectory
from .synth import Pose
from .traj_sim import (
    TARGET_STEP_DEG,
    TARGET_STEP_MM,
    angle_between,
    apply_sensor_noise,
    clear_volume,
    generate_trajectory,
    simulate_async_readings,
    step_statistics,
    summarize_errors,
    tune_trajectory,
)

log = logging.getLogger("magtrack")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGENCE = 0, 2, 3, 4


def _plots():
    # deferred so commands that draw nothing never import matplotlib
    from . import plotting

    return plotting


def _out(cfg):
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path, payload):
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=float) + "\n")
    log.info("wrote %s", path)


def _report(cfg, command, **body):
    return {"command": command, "config": cfg.resolved(), **body}


def _array_for_model(cfg, model):
    n = model.n_inputs // 3
    array = cfg.array
    if array.n == n:
        return array
    full = type(array).grid()
    try:
        return full.subset(n)
    except ConfigError as exc:
        raise ContractError(f"model takes {n} sensors but config selects {array.n}") from exc


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_gen_data(cfg, args):
    out = _out(cfg)
    count = args.count or cfg["eval"]["samples"]
    gen = DataGenerator(cfg.spec, cfg.array, cfg.source(), cfg.sampler)
    ds = gen.draw(count, stream=args.stream)
    ds.meta["source"] = cfg["source"]
    path = out / args.name
    write_dataset(ds, path)
    if args.csv:
        export_csv(ds, out / (args.name + ".csv"))
    _write_json(out / "gen_data.json", _report(cfg, "gen-data", dataset=str(path), samples=len(ds), meta=ds.meta))
    return EXIT_OK


def cmd_train(cfg, args):
    out = _out(cfg)
    tcfg = cfg.train
    overrides = {}
    if args.raw_inputs:
        overrides["input_transform"] = "raw"
    if args.batchnorm:
        overrides["batchnorm"] = True
    if overrides:
        tcfg = type(tcfg)(**{**tcfg.to_dict(), **overrides})
    gen = DataGenerator(cfg.spec, cfg.array, cfg.source(), cfg.sampler)
    model = new_model_for(tcfg, 3 * cfg.array.n)
    result = train(model, gen, tcfg)
    save_model(result.model, out / args.name)
    result.write_history(out / "loss_history.csv")
    _plots().plot_loss_history(result.history, out / "loss_history.png", title=f"{tcfg.input_transform}, bn={tcfg.batchnorm}")
    summary = {
        "model": str(out / args.name),
        "train": tcfg.to_dict(),
        "initial_test_loss": result.initial_test_loss,
        "final_test_loss": result.final_test_loss,
        "converged": result.converged(),
        "history": result.history,
    }
    if not summary["converged"]:
        log.warning("test loss fell by less than 2x; run flagged non-converged")
    _write_json(out / "train_report.json", _report(cfg, "train", **summary))
    return EXIT_OK


def cmd_eval(cfg, args):
    out = _out(cfg)
    methods = args.methods or cfg["eval"]["methods"]
    source_name = args.eval_source or cfg["source"]
    source = cfg.source(source_name)
    ecfg = cfg["eval"]
    rows, summary, boxes = [], {}, {}

    def add(label, e_p, e_th, stats):
        summary[label] = stats
        boxes[label] = (e_p, e_th)
        rows.extend(
            {"case_id": i, "method": label, "e_p_mm": float(a), "e_theta_deg": float(b)}
            for i, (a, b) in enumerate(zip(e_p, e_th))
        )

    if "mlp" in methods and not args.model and not args.perturbation:
        raise ConfigError("method 'mlp' needs at least one --model")
    for path in args.model or []:
        model = load_model(path)
        array = _array_for_model(cfg, model)
        data = ev.eval_dataset(cfg.spec, array, source, cfg.sampler, ecfg["samples"])
        e_p, e_th, stats = ev.evaluate_mlp(model, data)
        stats["sensors"] = array.n
        add(f"mlp[{array.n}]:{path}", e_p, e_th, stats)

    if "optimizer" in methods or "truth" in methods:
        data = ev.eval_dataset(cfg.spec, cfg.array, source, cfg.sampler, ecfg["samples"])
        if "truth" in methods:
            add("truth", *ev.evaluate_truth(data))
        if "optimizer" in methods:
            label = f"optimizer[{ecfg['init_dp_mm'][0]:g}mm,{ecfg['init_dtheta_deg'][0]:g}deg]"
            add(label, *ev.evaluate_optimizer(data, cfg.spec, cfg.optimizer, ecfg["init_dp_mm"][0], ecfg["init_dtheta_deg"][0], cfg.seed))

    report = {"eval_source": source_name, "methods": summary}
    if rows:
        ev.write_rows(rows, out / "eval_cases.csv", ["case_id", "method", "e_p_mm", "e_theta_deg"])
        _plots().plot_error_boxes({k.split(":")[0]: v for k, v in boxes.items()}, out / "eval_errors.png")

    if args.perturbation:
        bench = ev.perturbation_benchmark(
            cfg.spec,
            cfg.array,
            cfg.sampler,
            cases=ecfg["cases"],
            init_dp_mm=ecfg["init_dp_mm"],
            init_dtheta_deg=ecfg["init_dtheta_deg"],
            iterations=ecfg["iterations"],
            opt=cfg.optimizer,
            jobs=int(cfg["jobs"]),
        )
        ev.write_rows(bench, out / "perturbation_cases.csv", ev.BENCH_COLUMNS)
        report["perturbation"] = ev.summarize_benchmark(bench)
        _plots().plot_perturbation_sweep(report["perturbation"], out / "perturbation.png")

    _write_json(out / "eval_summary.json", _report(cfg, "eval", **report))
    return EXIT_OK


def cmd_track(cfg, args):
    out = _out(cfg)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(7,)))
    low, high = clear_volume(cfg.sampler.low, cfg.sampler.high, cfg.spec, plane_z=float(cfg.array.positions[:, 2].max()))
    traj = generate_trajectory(cfg.trajectory, low, high, rng)
    t_reading = cfg["eval"]["t_reading"]
    readings = simulate_async_readings(traj, cfg.array, cfg.source(), t_reading, rng)
    noise = cfg.noise
    if noise is not None:
        readings = apply_sensor_noise(readings, noise, rng)

    n = cfg.array.n
    cols = ["t", "px", "py", "pz", "ox", "oy", "oz"] + [f"B{i + 1}{ax}" for i in range(n) for ax in "xyz"]
    np.savetxt(out / "trajectory.csv", np.column_stack([traj.t, traj.p, traj.o, readings]), delimiter=",",
               header=",".join(cols), comments="", fmt="%.17g")

    estimates, summary = {}, {}
    if args.model:
        model = load_model(args.model)
        if model.n_inputs != 3 * n:
            raise ContractError(f"model takes {model.n_inputs // 3} sensors, config selects {n}")
        pred = predict_pose(model, readings)
        estimates["mlp"] = (pred.p, pred.o, np.ones(len(traj), bool))
    if not args.no_optimizer:
        ecfg = cfg["eval"]
        init = perturb_pose(Pose(traj.p[0], traj.o[0]), ecfg["init_dp_mm"][0] * 1e-3, ecfg["init_dtheta_deg"][0], rng)
        res = track_trajectory(readings, init, cfg.space, cfg.array, equivalent_dipole_moment(cfg.spec), cfg.optimizer)
        estimates["optimizer"] = (res.p, res.o, res.accepted)

    rows = []
    for name, (p, o, accepted) in estimates.items():
        e_p, e_th, stats = summarize_errors(traj.p, traj.o, p, o)
        stats["rejected_steps"] = int(np.count_nonzero(~accepted))
        if name == "optimizer":
            stats["all_in_space"] = bool(all(cfg.space.contains(x) for x in p[accepted]))
        summary[name] = stats
        for i in range(len(traj)):
            rows.append({"step": i, "t": traj.t[i], "method": name, "e_p_mm": e_p[i], "e_theta_deg": e_th[i], "accepted": bool(accepted[i])})
        _plots().plot_tracking(traj.t, e_p, e_th, out / f"tracking_{name}.png")
    if rows:
        ev.write_rows(rows, out / "tracking.csv")
    mm, deg = step_statistics(traj)
    _write_json(out / "track_summary.json", _report(cfg, "track", step_mm=mm, step_deg=deg, methods=summary))
    return EXIT_OK


def cmd_bench_time(cfg, args):
    out = _out(cfg)
    if args.model:
        model = load_model(args.model)
        array = _array_for_model(cfg, model)
    else:
        # inference cost depends on the architecture only
        model = new_model_for(cfg.train, 3 * cfg.array.n)
        array = cfg.array
    bcfg = cfg["bench"]
    report = ev.timing_benchmark(model, cfg.spec, array, cfg.sampler, bcfg["repeats"], bcfg["iterations"], cfg.optimizer)
    ev.write_rows([{"method": k, **v} for k, v in report.items()], out / "timing.csv")
    _plots().plot_timing(report, out / "timing.png")
    _write_json(out / "timing.json", _report(cfg, "bench-time", timing=report))
    return EXIT_OK


def cmd_tune_traj(cfg, args):
    out = _out(cfg)
    tcfg = cfg.trajectory
    best, rows = tune_trajectory(cfg.sampler.low, cfg.sampler.high, n_total=tcfg.n_total,
                                 seeds=range(args.seeds), lam=args.lam)
    ev.write_rows(rows, out / "tune_traj.csv")
    chosen = type(tcfg)(n_total=tcfg.n_total, granularity=best["granularity"], lam=best["lam"], frequency=tcfg.frequency, seed=tcfg.seed)
    traj = generate_trajectory(chosen, cfg.sampler.low, cfg.sampler.high, np.random.default_rng(tcfg.seed))
    step_mm = np.linalg.norm(np.diff(traj.p, axis=0), axis=1) * 1e3
    step_deg = np.degrees(angle_between(traj.o[:-1], traj.o[1:]))
    _plots().plot_step_histograms(step_mm, step_deg, out / "tune_traj.png", TARGET_STEP_MM, TARGET_STEP_DEG)
    _write_json(out / "tune_traj.json", _report(cfg, "tune-traj", best=best, target_mm=TARGET_STEP_MM, target_deg=TARGET_STEP_DEG))
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, dotted keys, JSON values (repeatable)")
    common.add_argument("--output-dir", help="report directory (beats the config and MAGTRACK_OUTPUT_DIR)")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--jobs", type=int, help="worker processes for sweeps")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="magtrack", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset")
    p.add_argument("--count", type=int)
    p.add_argument("--stream", type=int, default=0)
    p.add_argument("--name", default="dataset.mdat")
    p.add_argument("--csv", action="store_true", help="also export CSV")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train the network on fresh generator data")
    p.add_argument("--name", default="model.mmlp")
    p.add_argument("--raw-inputs", action="store_true", help="feed raw Tesla values instead of cube roots")
    p.add_argument("--batchnorm", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate networks and/or the optimizer")
    p.add_argument("--model", nargs="*", help="one or more model files")
    p.add_argument("--methods", nargs="*", choices=["mlp", "optimizer", "truth"])
    p.add_argument("--eval-source", choices=["dipole", "fem-surrogate", "analytic"])
    p.add_argument("--perturbation", action="store_true", help="run the initialization/iteration sweep")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("track", parents=[common], help="track one simulated trajectory")
    p.add_argument("--model")
    p.add_argument("--no-optimizer", action="store_true")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("bench-time", parents=[common], help="network inference vs L-BFGS wall time")
    p.add_argument("--model")
    p.set_defaults(func=cmd_bench_time)

    p = sub.add_parser("tune-traj", parents=[common], help="fit trajectory granularity to recorded step statistics")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--lam", type=float)
    p.set_defaults(func=cmd_tune_traj)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.jobs is not None:
        overrides.append(f"jobs={args.jobs}")
    try:
        cfg = ExperimentConfig.load(args.config, overrides, args.output_dir)
        return args.func(cfg, args)
    except (ConfigError, ContractError, DomainError) as exc:
        print(f"magtrack: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"magtrack: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except DivergenceError as exc:
        print(f"magtrack: numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE


if __name__ == "__main__":
    sys.exit(main())
