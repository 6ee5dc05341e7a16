"""Command line entry point: ``greyfdi <subcommand> ...``."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import benchplant
from .causal import (
    AlgebraicLoopError, Causality, NoPerfectMatchingError, build_comp_graph, causality_of,
    enumerate_integral_candidates, extract_state_space,
)
from .dataio import DataError, Normalizer, read_timeseries, write_timeseries
from .dmdecomp import detectable_faults, dm_decompose, dm_permuted_csv, partition_text, read_signature_csv
from .msoenum import MSOOverflowError, find_msos, support_matrix_csv
from .pipeline import (
    STAGES, DetectionConfig, PipelineConfig, PipelineError, benchmark_config, evaluate_residuals,
    load_config, run_pipeline, write_report,
)
from .rnngen import RNNHyperParams, build_rnn, save_weights
from .structmodel import ModelError, load_model
from .training import TrainingDivergence, make_batches, train

EXIT_OK, EXIT_ERROR, EXIT_STAGE, EXIT_NO_CANDIDATES = 0, 1, 2, 3


def _model(path: str):
    if path in ("builtin", "builtin:fourtank"):
        return benchplant.reference_structural_model()
    return load_model(path)


def _write(path: str | None, text: str) -> None:
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def cmd_validate(args) -> int:
    m = _model(args.model)
    dm = dm_decompose(m)
    print(f"ok: {len(m.equations)} equations, {len(m.unknowns)} unknowns, {len(m.known)} known, "
          f"{len(m.fault_names)} faults, {len(m.sensors)} sensors")
    print(f"structural redundancy: {dm.redundancy}")
    print(f"detectable faults: {' '.join(detectable_faults(m)) or '-'}")
    return EXIT_OK


def cmd_dm(args) -> int:
    m = _model(args.model)
    sys.stdout.write(partition_text(dm_decompose(m)))
    if args.csv:
        _write(args.csv, dm_permuted_csv(m))
    return EXIT_OK


def cmd_msos(args) -> int:
    m = _model(args.model)
    sets = find_msos(m, args.max_sets)
    for s in sets:
        print(f"{s.label}: {' '.join(s.equations)}")
    if args.support_matrix:
        _write(args.support_matrix, support_matrix_csv(sets, m))
    return EXIT_OK


def cmd_graphs(args) -> int:
    m = _model(args.model)
    msos = find_msos(m)
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    if args.mso is not None:
        mso = next((s for s in msos if s.id == args.mso), None)
        if mso is None:
            print(f"error: no MSO{args.mso} (model has {len(msos)})", file=sys.stderr)
            return EXIT_ERROR
        eqs = [args.residual] if args.residual else list(mso.equations)
        for e in eqs:
            try:
                g = build_comp_graph(m, mso, e)
            except (AlgebraicLoopError, NoPerfectMatchingError) as exc:
                print(f"{mso.label}_{e}: {exc}")
                continue
            print(f"{mso.label}_{e}: {causality_of(g).value}")
            if out:
                (out / f"{mso.label}_{e}.dot").write_text(g.to_dot(), encoding="utf-8")
            elif args.residual:
                sys.stdout.write(g.to_dot())
        return EXIT_OK
    sensors = args.sensors.replace(",", " ").split() if args.sensors else None
    cands = enumerate_integral_candidates(msos, m, sensors)
    for c in cands:
        s = extract_state_space(c.graph)
        print(f"{c.name}: {Causality.INTEGRAL.value}, states {' '.join(s.states)}, output {s.output_sensor}")
        if out:
            (out / f"{c.name}.dot").write_text(c.graph.to_dot(), encoding="utf-8")
            (out / f"{c.name}.json").write_text(s.to_text(), encoding="utf-8")
    if not cands:
        print("no candidates")
        return EXIT_NO_CANDIDATES
    return EXIT_OK


def cmd_simulate(args) -> int:
    spec = benchplant.PlantSpec()
    u = benchplant.input_profile(spec, args.samples, args.profile_seed)
    scen = None
    if args.fault:
        scen = benchplant.FaultScenario(args.fault, args.magnitude, args.onset)
    ds = benchplant.simulate_plant(spec, u, scen, seed=args.seed, noise=not args.no_noise)
    write_timeseries(args.out, {"time": ds.time, **ds.signals})
    print(f"wrote {len(ds)} samples to {args.out}")
    return EXIT_OK


def _config(path: str | None) -> PipelineConfig:
    return load_config(path) if path else benchmark_config()


def cmd_train(args) -> int:
    m = _model(args.model)
    cfg = _config(args.config)
    mso = next((s for s in find_msos(m) if s.id == args.mso), None)
    if mso is None:
        print(f"error: no MSO{args.mso}", file=sys.stderr)
        return EXIT_ERROR
    g = build_comp_graph(m, mso, args.residual)
    s = extract_state_space(g)
    table = read_timeseries(args.data, [*s.inputs, s.output_sensor], cfg.downsample, cfg.downsample_method)
    norm = Normalizer.fit(table, [n for n in m.known if n in table], cfg.normalization)
    data = norm.transform(table)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    norm.save(out / "normalization.json")
    (out / "structure.json").write_text(s.to_text(), encoding="utf-8")
    T = float(np.median(np.diff(table["time"]))) if "time" in table and len(table["time"]) > 1 else cfg.sampling_time
    U = np.column_stack([data[k] for k in s.inputs]) if s.inputs else np.zeros((len(data[s.output_sensor]), 0))
    batches = make_batches(U, data[s.output_sensor], cfg.training.batch_length, cfg.training.batch_count)
    name = f"{mso.label}_{args.residual}"
    for seed in args.seeds:
        hp = RNNHyperParams(hidden=cfg.training.hidden, sampling_time=T, seed=seed)
        result = train(build_rnn(s, hp), batches, replace(cfg.training, seed=seed))
        save_weights(result.rnn, out / f"{name}_seed{seed}.json")
        lines = ["epoch,loss"] + [f"{i},{v!r}" for i, v in enumerate(result.losses)]
        (out / f"{name}_seed{seed}_loss.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
        print(f"seed {seed}: final loss {result.losses[-1] if result.losses else float('nan'):.6g}")
    return EXIT_OK


def _scenario_arg(text: str) -> tuple[str, str, str, float]:
    try:
        name, rest = text.split("=", 1)
        path, fault, onset = rest.rsplit(":", 2)
        return name, path, fault, float(onset)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected NAME=PATH:FAULT:ONSET, got {text!r}") from None


def cmd_evaluate(args) -> int:
    cfg = _config(args.config)
    det: DetectionConfig = cfg.detection
    sig = read_signature_csv(Path(args.signature).read_text(encoding="utf-8"))
    nominal = [read_timeseries(p, ["time", *sig.rows]) for p in args.nominal]
    heldout = [read_timeseries(p, ["time", *sig.rows]) for p in args.heldout]
    scenarios = [(name, fault, onset, read_timeseries(path, ["time", *sig.rows]))
                 for name, path, fault, onset in args.scenario]
    report, summary, traces = evaluate_residuals(nominal, sig, det, scenarios, heldout)
    out = Path(args.out)
    (out / "cusum").mkdir(parents=True, exist_ok=True)
    for name, trace in traces.items():
        write_timeseries(out / "cusum" / f"{name}.csv", trace)
    log_lines = ["scenario,residual,alarm_index,delay_s"]
    for entry in summary["scenarios"]:
        for r in sig.rows:
            at, d = entry["alarm_times"][r], entry["delays"][r]
            log_lines.append(f"{entry['name']},{r},{'' if at is None else at},{'' if d is None else repr(d)}")
    (out / "alarms.csv").write_text("\n".join(log_lines) + "\n", encoding="utf-8")
    write_report(report, out, summary)
    sys.stdout.write(report.to_text())
    return EXIT_OK


def cmd_pipeline(args) -> int:
    cfg = _config(args.config)
    if args.out:
        cfg = replace(cfg, output=args.out)
    if args.workers:
        cfg = replace(cfg, workers=args.workers)
    result = run_pipeline(cfg, until=args.until)
    print(f"status: {result.status}")
    print(f"stages run: {' '.join(result.ran) or '-'}; unchanged: {' '.join(result.skipped) or '-'}")
    print(f"output: {result.output}")
    if result.status == "no candidates":
        return EXIT_NO_CANDIDATES
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="greyfdi", description="Structural analysis and grey-box residual generators.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("validate", help="parse and check a structural model")
    s.add_argument("model", help="model file or 'builtin'")
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("dm", help="Dulmage-Mendelsohn partition")
    s.add_argument("model")
    s.add_argument("--csv", help="write the DM-ordered incidence matrix here ('-' for stdout)")
    s.set_defaults(func=cmd_dm)

    s = sub.add_parser("msos", help="enumerate MSO sets")
    s.add_argument("model")
    s.add_argument("--support-matrix", help="write the MSO x equation table here ('-' for stdout)")
    s.add_argument("--max-sets", type=int, default=10_000)
    s.set_defaults(func=cmd_msos)

    s = sub.add_parser("graphs", help="computational graphs and integral-causality candidates")
    s.add_argument("model")
    s.add_argument("--sensors", help="comma separated measured signals allowed as residual outputs")
    s.add_argument("--mso", type=int, help="classify every residual choice of one MSO instead")
    s.add_argument("--residual", help="with --mso: a single residual equation")
    s.add_argument("--out", help="directory for DOT files and state-space structures")
    s.set_defaults(func=cmd_graphs)

    s = sub.add_parser("simulate", help="simulate the benchmark plant to CSV")
    s.add_argument("--samples", type=int, default=3000)
    s.add_argument("--profile-seed", type=int, default=0)
    s.add_argument("--seed", type=int, default=0, help="noise seed")
    s.add_argument("--fault", choices=sorted([*benchplant.SENSOR_FAULTS, *benchplant.LEAK_FAULTS]))
    s.add_argument("--magnitude", type=float, default=0.0)
    s.add_argument("--onset", type=float, default=50.0)
    s.add_argument("--no-noise", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("train", help="train one residual generator on a CSV dataset")
    s.add_argument("--model", required=True)
    s.add_argument("--mso", type=int, required=True)
    s.add_argument("--residual", required=True, help="sensor equation used as residual")
    s.add_argument("--data", required=True)
    s.add_argument("--config", help="INI file; the benchmark settings when omitted")
    s.add_argument("--seeds", type=lambda t: [int(x) for x in t.split(",")], default=[0])
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="CUSUM, AUC and diagnosis from residual CSVs")
    s.add_argument("--nominal", nargs="+", required=True, help="fault-free residual CSVs used for tuning")
    s.add_argument("--heldout", nargs="*", default=[], help="fault-free residual CSVs for the false-alarm check")
    s.add_argument("--scenario", type=_scenario_arg, action="append", default=[],
                   help="NAME=PATH:FAULT:ONSET (onset in seconds)")
    s.add_argument("--signature", required=True, help="fault signature CSV")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("pipeline", help="run every stage from a config file")
    s.add_argument("--config", help="INI file; the bundled benchmark when omitted")
    s.add_argument("--out")
    s.add_argument("--workers", type=int)
    s.add_argument("--until", choices=STAGES)
    s.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ModelError as exc:
        print(f"model error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except PipelineError as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except (DataError, MSOOverflowError, TrainingDivergence, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
