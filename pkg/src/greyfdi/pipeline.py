"""End-to-end design of residual generators from a structural model.

Stages run in order and persist everything they produce under the output
directory, so later stages (and re-runs) read their inputs from disk::

    validate -> dm -> msos -> graphs -> data -> train -> evaluate

A stage whose inputs are unchanged since the last run is skipped; the
stamp files in ``.stages/`` hold the content hashes that decide this.
"""
from __future__ import annotations

import configparser
import hashlib
import json
import logging
import os
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import benchplant
from .causal import Candidate, StateSpaceStructure, enumerate_integral_candidates, extract_state_space
from .dataio import DataError, Normalizer, read_timeseries, write_timeseries
from .detection import (
    AUCRow, CusumTuning, DetectionReport, auc_table_csv, debias, diagnose, roc_auc, run_cusum, tune_cusum,
)
from .dmdecomp import detectable_faults, dm_decompose, dm_permuted_csv, fault_signature, partition_text
from .msoenum import MSOSet, find_msos, natural_key, support_matrix_csv
from .rnngen import GreyBoxRNN, RNNHyperParams, SimulationDivergence, build_rnn, load_weights, rnn_simulate, save_weights
from .structmodel import ModelError, StructuralModel, load_model, parse_model, serialize_model
from .training import TrainConfig, make_batches, train

log = logging.getLogger(__name__)

ENV_OUTPUT = "GREYFDI_OUTPUT"
ENV_WORKERS = "GREYFDI_WORKERS"
BUILTIN_MODEL = "builtin:fourtank"
STAGES = ("validate", "dm", "msos", "graphs", "data", "train", "evaluate")


class PipelineError(RuntimeError):
    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(f"[{stage}] {message}")


def derive_seed(root: int, *labels) -> int:
    """Stable 32-bit seed for one consumer of randomness under ``root``."""
    key = "/".join([str(root), *map(str, labels)])
    return int.from_bytes(hashlib.sha256(key.encode()).digest()[:4], "big")


def _floats(text: str) -> tuple[float, ...]:
    text = text.strip()
    if ":" in text:
        lo, hi, n = text.split(":")
        return tuple(float(v) for v in np.round(np.linspace(float(lo), float(hi), int(n)), 10))
    return tuple(float(v) for v in text.replace(",", " ").split())


def _names(text: str) -> tuple[str, ...]:
    return tuple(t for t in text.replace(",", " ").split())


@dataclass(frozen=True)
class ScenarioFile:
    name: str
    path: str
    fault: str
    onset: float


@dataclass(frozen=True)
class PlantDataConfig:
    train_samples: int = 14400
    validation_samples: int = 3000
    scenario_samples: int = 3000
    tuning_runs: int = 4
    heldout_runs: int = 4
    onset: float = 50.0
    diagnosis_seeds: int = 5


@dataclass(frozen=True)
class DetectionConfig:
    warmup: int = 400
    debias_window: int = 100
    margin: float = 3.0
    safety: float = 2.0
    target_rate: float = 0.0
    magnitudes: tuple[float, ...] = tuple(float(v) for v in np.round(np.linspace(-0.2, 0.2, 21), 10))
    detect_magnitude: float = 0.2


@dataclass(frozen=True)
class PipelineConfig:
    model: str = BUILTIN_MODEL
    source: str = "plant"  # "plant" simulates the bundled benchmark, "csv" reads files
    train_path: str | None = None
    validation_path: str | None = None
    nominal_paths: tuple[str, ...] = ()
    heldout_paths: tuple[str, ...] = ()
    scenarios: tuple[ScenarioFile, ...] = ()
    downsample: int = 1
    downsample_method: str = "stride"
    normalization: str = "minmax"
    sampling_time: float = 0.05  # of the raw files; used when they carry no time column
    plant: PlantDataConfig = PlantDataConfig()
    sensors: tuple[str, ...] | None = None  # None: every measured signal
    select: str = "smallest"
    training: TrainConfig = TrainConfig()
    members: int = 1
    detection: DetectionConfig = DetectionConfig()
    seed: int = 0
    output: str = "greyfdi-out"
    workers: int = 1

    def __post_init__(self):
        if self.source not in ("plant", "csv"):
            raise ValueError(f"unknown data source {self.source!r}")
        if self.select not in ("smallest", "all"):
            raise ValueError(f"unknown candidate selection {self.select!r}")
        if self.members < 1 or self.workers < 1:
            raise ValueError("members and workers must be positive")
        if self.source == "csv" and not (self.train_path and self.validation_path and self.nominal_paths):
            raise ValueError("csv source needs train, validation and nominal files")

    def load_model(self) -> StructuralModel:
        if self.model == BUILTIN_MODEL:
            return benchplant.reference_structural_model()
        return load_model(self.model)

    def check_paths(self) -> None:
        paths = [] if self.model == BUILTIN_MODEL else [self.model]
        if self.source == "csv":
            paths += [self.train_path, self.validation_path, *self.nominal_paths, *self.heldout_paths]
            paths += [s.path for s in self.scenarios]
        missing = [p for p in paths if not Path(p).is_file()]
        if missing:
            raise PipelineError("validate", f"missing input files: {missing}")


def config_from_text(text: str, base_dir: str | os.PathLike = ".",
                     env: Mapping[str, str] | None = None) -> PipelineConfig:
    """Parse an INI-style config; relative paths resolve against ``base_dir``."""
    env = os.environ if env is None else env
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.read_string(text)
    base = Path(base_dir)

    def path(p: str) -> str:
        return str(base / p) if not Path(p).is_absolute() else p

    def sec(name: str):
        return cp[name] if cp.has_section(name) else {}

    kw: dict = {}
    m = sec("model")
    if "path" in m:
        kw["model"] = m["path"] if m["path"] == BUILTIN_MODEL else path(m["path"])
    d = sec("data")
    if "source" in d:
        kw["source"] = d["source"]
    for key in ("train", "validation"):
        if key in d:
            kw[f"{key}_path"] = path(d[key])
    for key in ("nominal", "heldout"):
        if key in d:
            kw[f"{key}_paths"] = tuple(path(p) for p in _names(d[key]))
    if "downsample" in d:
        kw["downsample"] = int(d["downsample"])
    if "downsample_method" in d:
        kw["downsample_method"] = d["downsample_method"]
    if "normalization" in d:
        kw["normalization"] = d["normalization"]
    if "sampling_time" in d:
        kw["sampling_time"] = float(d["sampling_time"])
    if cp.has_section("scenarios"):
        scen = []
        for name, spec in cp["scenarios"].items():
            parts = [p.strip() for p in spec.split(",")]
            if len(parts) != 3:
                raise ValueError(f"scenario {name}: expected 'path, fault, onset'")
            scen.append(ScenarioFile(name, path(parts[0]), parts[1], float(parts[2])))
        kw["scenarios"] = tuple(scen)
    p = sec("plant")
    if p:
        kw["plant"] = PlantDataConfig(**{
            k: (float(v) if k == "onset" else int(v)) for k, v in p.items()
        })
    c = sec("candidates")
    if "sensors" in c:
        kw["sensors"] = _names(c["sensors"])
    if "select" in c:
        kw["select"] = c["select"]
    t = sec("training")
    if t:
        tkw: dict = {}
        for k, v in t.items():
            if k == "members":
                kw["members"] = int(v)
            elif k == "hidden":
                tkw[k] = tuple(int(x) for x in _names(v))
            elif k in ("learning_rate", "decay", "beta1", "beta2", "eps"):
                tkw[k] = float(v)
            elif k in ("shuffle", "carry_state"):
                tkw[k] = t.getboolean(k)
            else:
                tkw[k] = int(v)
        kw["training"] = TrainConfig(**tkw)
    det = sec("detection")
    if det:
        dkw: dict = {}
        for k, v in det.items():
            if k in ("warmup", "debias_window"):
                dkw[k] = int(v)
            elif k == "magnitudes":
                dkw[k] = _floats(v)
            else:
                dkw[k] = float(v)
        kw["detection"] = DetectionConfig(**dkw)
    r = sec("run")
    if "seed" in r:
        kw["seed"] = int(r["seed"])
    if "output" in r:
        kw["output"] = path(r["output"])
    if "workers" in r:
        kw["workers"] = int(r["workers"])
    if env.get(ENV_OUTPUT):
        kw["output"] = env[ENV_OUTPUT]
    if env.get(ENV_WORKERS):
        kw["workers"] = int(env[ENV_WORKERS])
    return PipelineConfig(**kw)


def load_config(path, env: Mapping[str, str] | None = None) -> PipelineConfig:
    p = Path(path)
    return config_from_text(p.read_text(encoding="utf-8"), p.parent, env)


def benchmark_config_text() -> str:
    from importlib import resources

    return resources.files("greyfdi.data").joinpath("benchmark.ini").read_text(encoding="utf-8")


def benchmark_config(env: Mapping[str, str] | None = None, **overrides) -> PipelineConfig:
    cfg = config_from_text(benchmark_config_text(), ".", env)
    return replace(cfg, **overrides) if overrides else cfg


# ---------------------------------------------------------------- helpers


def select_candidates(cands: Sequence[Candidate], m: StructuralModel, how: str = "smallest") -> list[Candidate]:
    """``smallest`` keeps, per measured signal, the candidate with the fewest
    equations (ties: lower MSO id)."""
    if how == "all":
        return list(cands)
    best: dict[str, Candidate] = {}
    for c in cands:
        y = m.sensors[c.residual_eq]
        cur = best.get(y)
        if cur is None or (len(c.mso), c.mso.id) < (len(cur.mso), cur.mso.id):
            best[y] = c
    return sorted(best.values(), key=lambda c: natural_key(c.name))


@dataclass
class Generator:
    """One residual generator: a structure plus one or more trained members."""

    name: str
    structure: StateSpaceStructure
    members: list[GreyBoxRNN]
    equations: tuple[str, ...] = ()

    def predict(self, data: Mapping[str, np.ndarray]) -> np.ndarray:
        y = data[self.structure.output_sensor]
        inputs = {k: data[k] for k in self.structure.inputs}
        try:
            preds = [rnn_simulate(m, inputs, y).y_hat for m in self.members]
        except SimulationDivergence as exc:
            raise SimulationDivergence(f"generator {self.name}: {exc}", exc.step) from exc
        return np.mean(preds, axis=0)

    def residual(self, data: Mapping[str, np.ndarray]) -> np.ndarray:
        return np.asarray(data[self.structure.output_sensor], dtype=float) - self.predict(data)


def _processed(r: np.ndarray, det: DetectionConfig) -> np.ndarray:
    return debias(r[det.warmup:], det.debias_window)


def write_report(report: DetectionReport, out_dir, summary: Mapping | None = None) -> list[Path]:
    """Write the text report, the signature matrix, AUC tables and an
    optional JSON summary; returns the written paths."""
    out = Path(out_dir)
    (out / "auc").mkdir(parents=True, exist_ok=True)
    written = [out / "report.txt", out / "signature.csv"]
    written[0].write_text(report.to_text(), encoding="utf-8")
    written[1].write_text(report.signature.to_csv(), encoding="utf-8")
    for gen, tables in report.auc_tables.items():
        for key, rows in tables.items():
            p = out / "auc" / f"{gen}__{key}.csv"
            p.write_text(auc_table_csv(rows), encoding="utf-8")
            written.append(p)
    if summary is not None:
        p = out / "summary.json"
        p.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        written.append(p)
    return written


def _hash(*parts) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(json.dumps(p, sort_keys=True, default=str).encode())
        h.update(b"\0")
    return h.hexdigest()


def _file_hash(paths: Sequence[Path]) -> str:
    h = hashlib.sha256()
    for p in sorted(paths):
        h.update(str(p.name).encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def _train_member(job: tuple) -> tuple[str, str, list[float]]:
    """Worker entry point: (name, structure json, train arrays, cfg, hp) ->
    (name, weights path, losses)."""
    name, structure_text, U, Y, cfg, hp, path = job
    s = StateSpaceStructure.from_text(structure_text)
    rnn = build_rnn(s, hp)
    result = train(rnn, make_batches(U, Y, cfg.batch_length, cfg.batch_count), cfg)
    save_weights(result.rnn, path)
    return name, path, result.losses


@dataclass
class PipelineResult:
    status: str
    output: Path
    ran: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status == "ok"


class Pipeline:
    def __init__(self, cfg: PipelineConfig, out_dir: str | os.PathLike | None = None):
        self.cfg = cfg
        self.out = Path(out_dir or cfg.output)
        self.result = PipelineResult("running", self.out)

    # -- stage bookkeeping

    def _stamp(self, stage: str) -> Path:
        return self.out / ".stages" / f"{stage}.key"

    def _run_stage(self, stage: str, key: str, fn: Callable[[], None]) -> None:
        stamp = self._stamp(stage)
        if stamp.is_file() and stamp.read_text() == key:
            log.info("stage %s unchanged, skipped", stage)
            self.result.skipped.append(stage)
            return
        try:
            fn()
        except PipelineError:
            raise
        except (ModelError, DataError, ValueError, FloatingPointError, OSError) as exc:
            raise PipelineError(stage, str(exc)) from exc
        stamp.parent.mkdir(parents=True, exist_ok=True)
        stamp.write_text(key)
        self.result.ran.append(stage)

    def _key(self, stage: str) -> str:
        return self._stamp(stage).read_text()

    # -- stages

    def validate(self) -> None:
        self.cfg.check_paths()
        m = self.cfg.load_model()
        if self.cfg.sensors is not None:
            unknown = set(self.cfg.sensors) - set(m.sensors.values())
            if unknown:
                raise PipelineError("validate", f"sensor filter names unmeasured signals: {sorted(unknown)}")
        text = serialize_model(m)
        (self.out / "model.txt").write_text(text, encoding="utf-8")
        lines = [
            f"equations: {len(m.equations)}",
            f"unknowns: {len(m.unknowns)}",
            f"known signals: {' '.join(m.known)}",
            f"faults: {' '.join(m.fault_names) or '-'}",
            f"sensors: {' '.join(f'{e}->{y}' for e, y in m.sensors.items()) or '-'}",
            f"structural redundancy: {dm_decompose(m).redundancy}",
            f"detectable faults: {' '.join(detectable_faults(m)) or '-'}",
        ]
        (self.out / "validate.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")

    def model(self) -> StructuralModel:
        return parse_model((self.out / "model.txt").read_text(encoding="utf-8"))

    def dm(self) -> None:
        m = self.model()
        (self.out / "dm.txt").write_text(partition_text(dm_decompose(m)), encoding="utf-8")
        (self.out / "dm_incidence.csv").write_text(dm_permuted_csv(m), encoding="utf-8")

    def msos(self) -> None:
        m = self.model()
        sets = find_msos(m)
        lines = [f"{s.label}: {' '.join(s.equations)}" for s in sets]
        (self.out / "msos.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
        (self.out / "support.csv").write_text(support_matrix_csv(sets, m), encoding="utf-8")

    def load_msos(self) -> list[MSOSet]:
        out = []
        for line in (self.out / "msos.txt").read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            label, eqs = line.split(":", 1)
            out.append(MSOSet(int(label[3:]), tuple(eqs.split())))
        return out

    def graphs(self) -> None:
        m = self.model()
        cands = enumerate_integral_candidates(self.load_msos(), m, self.cfg.sensors)
        chosen = select_candidates(cands, m, self.cfg.select)
        gdir, sdir = self.out / "graphs", self.out / "structures"
        for d in (gdir, sdir):
            shutil.rmtree(d, ignore_errors=True)
            d.mkdir(parents=True)
        for c in cands:
            (gdir / f"{c.name}.dot").write_text(c.graph.to_dot(), encoding="utf-8")
        lines = []
        for c in chosen:
            s = extract_state_space(c.graph)
            (sdir / f"{c.name}.json").write_text(s.to_text(), encoding="utf-8")
            lines.append(f"{c.name}: {' '.join(c.mso.equations)}")
        all_lines = [f"{c.name}: {' '.join(c.mso.equations)}" for c in cands]
        (self.out / "candidates.txt").write_text("\n".join(all_lines) + ("\n" if all_lines else ""), encoding="utf-8")
        (self.out / "selected.txt").write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")

    def selected(self) -> list[tuple[str, tuple[str, ...], StateSpaceStructure]]:
        out = []
        for line in (self.out / "selected.txt").read_text(encoding="utf-8").splitlines():
            if line.strip():
                name, eqs = line.split(":", 1)
                s = StateSpaceStructure.from_text((self.out / "structures" / f"{name}.json").read_text(encoding="utf-8"))
                out.append((name, tuple(eqs.split()), s))
        return out

    def data(self) -> None:
        cfg = self.cfg
        ddir = self.out / "data"
        shutil.rmtree(ddir, ignore_errors=True)
        ddir.mkdir(parents=True)
        if cfg.source == "plant":
            spec, pc = benchplant.PlantSpec(), cfg.plant
            runs = {"train": pc.train_samples, "validation": pc.validation_samples}
            runs.update({f"tune{i}": pc.scenario_samples for i in range(pc.tuning_runs)})
            runs.update({f"heldout{i}": pc.scenario_samples for i in range(pc.heldout_runs)})
            for name, n in runs.items():
                u = benchplant.input_profile(spec, n, derive_seed(cfg.seed, "data", name, "profile"))
                ds = benchplant.simulate_plant(spec, u, seed=derive_seed(cfg.seed, "data", name, "noise"))
                write_timeseries(ddir / f"{name}.csv", {"time": ds.time, **ds.signals})
        else:
            files = {"train": cfg.train_path, "validation": cfg.validation_path}
            files.update({f"tune{i}": p for i, p in enumerate(cfg.nominal_paths)})
            files.update({f"heldout{i}": p for i, p in enumerate(cfg.heldout_paths)})
            files.update({f"scenario_{s.name}": s.path for s in cfg.scenarios})
            m = self.model()
            for name, p in files.items():
                table = read_timeseries(p, m.known, cfg.downsample, cfg.downsample_method)
                if "time" not in table:
                    n = len(table[m.known[0]])
                    table = {"time": np.arange(n) * cfg.sampling_time * cfg.downsample, **table}
                write_timeseries(ddir / f"{name}.csv", table)
        train_data = read_timeseries(ddir / "train.csv")
        norm = Normalizer.fit(train_data, self.model().known, cfg.normalization)
        norm.save(self.out / "normalization.json")

    def load_data(self, name: str) -> dict[str, np.ndarray]:
        norm = Normalizer.load(self.out / "normalization.json")
        return norm.transform(read_timeseries(self.out / "data" / f"{name}.csv"))

    def train(self) -> None:
        cfg = self.cfg
        wdir, ldir = self.out / "weights", self.out / "losses"
        for d in (wdir, ldir):
            shutil.rmtree(d, ignore_errors=True)
            d.mkdir(parents=True)
        data = self.load_data("train")
        jobs = []
        for name, _, s in self.selected():
            U = np.column_stack([data[k] for k in s.inputs]) if s.inputs else np.zeros((len(data[s.output_sensor]), 0))
            Y = data[s.output_sensor]
            for j in range(cfg.members):
                seed = derive_seed(cfg.seed, "member", name, j)
                hp = RNNHyperParams(hidden=cfg.training.hidden, seed=seed, sampling_time=self._sampling_time(data))
                tcfg = replace(cfg.training, seed=seed)
                jobs.append((f"{name}_m{j}", s.to_text(), U, Y, tcfg, hp, str(wdir / f"{name}_m{j}.json")))
        if cfg.workers > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
                results = list(pool.map(_train_member, jobs))
        else:
            results = [_train_member(j) for j in jobs]
        for name, _, losses in results:
            lines = ["epoch,loss"] + [f"{i},{v!r}" for i, v in enumerate(losses)]
            (ldir / f"{name}.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")

    @staticmethod
    def _sampling_time(data: Mapping[str, np.ndarray]) -> float:
        t = data["time"]
        return float(np.median(np.diff(t))) if len(t) > 1 else 1.0

    def generators(self) -> list[Generator]:
        gens = []
        for name, eqs, s in self.selected():
            members = [load_weights(self.out / "weights" / f"{name}_m{j}.json", s) for j in range(self.cfg.members)]
            gens.append(Generator(name, s, members, eqs))
        return gens

    def evaluate(self) -> None:
        cfg, det = self.cfg, self.cfg.detection
        m = self.model()
        gens = self.generators()
        norm = Normalizer.load(self.out / "normalization.json")
        sig = fault_signature([g.equations for g in gens], m, [g.name for g in gens])
        rdir, cdir = self.out / "residuals", self.out / "cusum"
        for d in (rdir, cdir, self.out / "auc"):
            shutil.rmtree(d, ignore_errors=True)
            d.mkdir(parents=True)

        def residuals(data) -> dict[str, np.ndarray]:
            return dict(zip([g.name for g in gens], residuals_of(gens, data)))

        def dump(name, data, res):
            write_timeseries(rdir / f"{name}.csv", {"time": data["time"], **res})

        summary: dict = {"generators": {}, "scenarios": [], "status": "ok"}
        val = self.load_data("validation")
        vres = residuals(val)
        dump("validation", val, vres)
        for g in gens:
            r = vres[g.name][det.warmup:]
            summary["generators"][g.name] = {
                "structure_hash": g.structure.hash,
                "output_sensor": g.structure.output_sensor,
                "equations": list(g.equations),
                "validation_rmse": float(np.sqrt(np.mean(r**2))),
                "validation_rmse_debiased": float(np.sqrt(np.mean(_processed(vres[g.name], det) ** 2))),
                "sensitive_faults": [f for f in sig.cols if sig.column(f)[gens.index(g)]],
                "output_faults": [f for f, e in m.faults.items() if e == g.structure.residual_eq],
            }

        tune = [residuals(self.load_data(f"tune{i}")) for i in range(self._count("tune"))]
        held_names = [f"heldout{i}" for i in range(self._count("heldout"))]
        held = []
        for name in held_names:
            data = self.load_data(name)
            res = residuals(data)
            dump(name, data, res)
            held.append(res)
        tunings: dict[str, CusumTuning] = {}
        for g in gens:
            t = tune_cusum([_processed(r[g.name], det) for r in tune], det.target_rate, det.margin, det.safety,
                           heldout=[_processed(r[g.name], det) for r in held] or None)
            tunings[g.name] = t
            alarms = [run_cusum(_processed(r[g.name], det), t).alarm_time for r in held]
            summary["generators"][g.name]["tuning"] = asdict(t)
            summary["generators"][g.name]["heldout_alarms"] = sum(a is not None for a in alarms)

        report = DetectionReport(sig, tunings=tunings)
        if cfg.source == "plant":
            self._plant_scenarios(gens, norm, report, summary, dump)
        else:
            self._file_scenarios(gens, report, summary, dump, tune)
        write_report(report, self.out, summary)

    def _count(self, prefix: str) -> int:
        return len(list((self.out / "data").glob(f"{prefix}*.csv")))

    def _scenario_outcome(self, name, fault, magnitude, onset, data, res, gens, report, summary, dump):
        det = self.cfg.detection
        dump(name, data, res)
        times, delays, pattern, trace = {}, {}, [], {"time": data["time"][det.warmup:]}
        for g in gens:
            cr = run_cusum(_processed(res[g.name], det), report.tunings[g.name])
            trace[f"{g.name}_pos"], trace[f"{g.name}_neg"] = cr.t_pos, cr.t_neg
            at = None if cr.alarm_time is None else cr.alarm_time + det.warmup
            times[g.name] = at
            delays[g.name] = None if at is None else float(data["time"][at] - onset)
            pattern.append(at is not None)
        write_timeseries(self.out / "cusum" / f"{name}.csv", trace)
        ranked = diagnose(np.array(pattern), report.signature)
        report.alarm_times[name] = times
        report.diagnoses[name] = ranked
        summary["scenarios"].append({
            "name": name, "fault": fault, "magnitude": magnitude, "onset": onset,
            "alarm_times": times, "delays": delays, "pattern": pattern, "diagnosis": ranked,
        })

    def _plant_scenarios(self, gens, norm, report, summary, dump):
        cfg, det, pc = self.cfg, self.cfg.detection, self.cfg.plant
        spec = benchplant.PlantSpec()
        m = self.model()
        warm = slice(int(round(pc.onset / spec.sampling_time)) - det.warmup, None)

        def sim(profile_key, noise_key, scenario=None):
            u = benchplant.input_profile(spec, pc.scenario_samples, derive_seed(cfg.seed, *profile_key))
            ds = benchplant.simulate_plant(spec, u, scenario, seed=derive_seed(cfg.seed, *noise_key))
            return norm.transform({"time": ds.time, **ds.signals})

        # AUC against fault size: one input profile, independent noise for nominal and faulty runs
        nominal = sim(("auc", "profile"), ("auc", "nominal"))
        nom_res = {g.name: _processed(r, det)[warm] for g, r in zip(gens, residuals_of(gens, nominal))}
        auc = {g.name: {} for g in gens}
        for fault in m.fault_names:
            rows = {g.name: [] for g in gens}
            mags = [f for f in det.magnitudes if fault not in benchplant.LEAK_FAULTS or f >= 0]
            for f in mags:
                data = sim(("auc", "profile"), ("auc", "faulty"), benchplant.FaultScenario(fault, f, pc.onset))
                for g, r in zip(gens, residuals_of(gens, data)):
                    rows[g.name].append(AUCRow(f, roc_auc(nom_res[g.name], _processed(r, det)[warm])))
            for g in gens:
                auc[g.name][fault] = rows[g.name]
        report.auc_tables = auc
        summary["auc"] = {
            g: {f: [[r.magnitude, r.auc.normalized_pos, r.auc.normalized_neg] for r in rows] for f, rows in t.items()}
            for g, t in auc.items()
        }

        # seeded single-fault scenarios for detection delay and isolation
        for fault in m.fault_names:
            for k in range(pc.diagnosis_seeds):
                sign = 1.0 if (k % 2 == 0 or fault in benchplant.LEAK_FAULTS) else -1.0
                mag = sign * det.detect_magnitude
                name = f"{fault}_{k}"
                scen = benchplant.FaultScenario(fault, mag, pc.onset)
                data = sim(("diag", fault, k, "profile"), ("diag", fault, k, "noise"), scen)
                res = dict(zip([g.name for g in gens], residuals_of(gens, data)))
                self._scenario_outcome(name, fault, mag, pc.onset, data, res, gens, report, summary, dump)

    def _file_scenarios(self, gens, report, summary, dump, tune):
        det = self.cfg.detection
        nominal = {g.name: np.concatenate([_processed(r[g.name], det) for r in tune]) for g in gens}
        auc: dict = {g.name: {} for g in gens}
        for s in self.cfg.scenarios:
            data = self.load_data(f"scenario_{s.name}")
            res = dict(zip([g.name for g in gens], residuals_of(gens, data)))
            post = data["time"][det.warmup:] >= s.onset
            for g in gens:
                r = _processed(res[g.name], det)[post]
                if r.size:
                    auc[g.name][s.name] = [AUCRow(float("nan"), roc_auc(nominal[g.name], r))]
            self._scenario_outcome(s.name, s.fault, None, s.onset, data, res, gens, report, summary, dump)
        report.auc_tables = auc

    # -- driver

    def run(self, until: str | None = None) -> PipelineResult:
        cfg = self.cfg
        self.out.mkdir(parents=True, exist_ok=True)
        if cfg.model == BUILTIN_MODEL:
            model_text = benchplant.reference_model_text()
        else:
            model_text = Path(cfg.model).read_text(encoding="utf-8") if Path(cfg.model).is_file() else ""
        keys: dict[str, str] = {}
        keys["validate"] = _hash("validate", cfg.model, model_text, cfg.sensors)
        order = [
            ("validate", self.validate, lambda: keys["validate"]),
            ("dm", self.dm, lambda: _hash("dm", keys["validate"])),
            ("msos", self.msos, lambda: _hash("msos", keys["validate"])),
            ("graphs", self.graphs, lambda: _hash("graphs", keys["msos"], cfg.sensors, cfg.select)),
            ("data", self.data, lambda: _hash("data", keys["validate"], cfg.source, cfg.train_path,
                                              cfg.validation_path, cfg.nominal_paths, cfg.heldout_paths,
                                              [asdict(s) for s in cfg.scenarios], cfg.downsample,
                                              cfg.downsample_method, cfg.normalization, cfg.sampling_time,
                                              asdict(cfg.plant),
                                              cfg.seed, self._input_files_hash())),
            ("train", self.train, lambda: _hash("train", keys["graphs"], keys["data"], asdict(cfg.training),
                                                cfg.members, cfg.seed)),
            ("evaluate", self.evaluate, lambda: _hash("evaluate", keys["train"], asdict(cfg.detection),
                                                      asdict(cfg.plant), cfg.seed)),
        ]
        for stage, fn, key in order:
            keys[stage] = key()
            self._run_stage(stage, keys[stage], fn)
            if stage == "graphs" and not (self.out / "selected.txt").read_text(encoding="utf-8").strip():
                self.result.status = "no candidates"
                return self.result
            if stage == until:
                break
        self.result.status = "ok"
        summary_path = self.out / "summary.json"
        if summary_path.is_file():
            self.result.summary = json.loads(summary_path.read_text(encoding="utf-8"))
        return self.result

    def _input_files_hash(self) -> str:
        if self.cfg.source != "csv":
            return ""
        cfg = self.cfg
        paths = [cfg.train_path, cfg.validation_path, *cfg.nominal_paths, *cfg.heldout_paths]
        return _file_hash([Path(p) for p in [*paths, *(s.path for s in cfg.scenarios)]])


def residuals_of(gens: Sequence[Generator], data: Mapping[str, np.ndarray]) -> list[np.ndarray]:
    return [g.residual(data) for g in gens]


def run_pipeline(cfg: PipelineConfig, out_dir: str | os.PathLike | None = None,
                 until: str | None = None) -> PipelineResult:
    if until is not None and until not in STAGES:
        raise ValueError(f"unknown stage {until!r}")
    return Pipeline(cfg, out_dir).run(until)


def evaluate_residuals(nominal: Sequence[Mapping[str, np.ndarray]], sig, det: DetectionConfig = DetectionConfig(),
                       scenarios: Sequence[tuple[str, str | None, float, Mapping[str, np.ndarray]]] = (),
                       heldout: Sequence[Mapping[str, np.ndarray]] = ()) -> tuple[DetectionReport, dict, dict]:
    """Detection and isolation from precomputed residual tables.

    Tables map ``time`` and one column per residual (named as the rows of
    ``sig``) to raw residual series. ``scenarios`` holds (name, fault,
    onset seconds, table). Returns the report, a JSON-ready summary and the
    CUSUM traces per scenario.
    """
    names = list(sig.rows)
    for table in [*nominal, *heldout, *(s[3] for s in scenarios)]:
        missing = [n for n in names if n not in table]
        if missing:
            raise DataError(f"residual table lacks columns {missing}")
    tunings = {
        n: tune_cusum([_processed(np.asarray(t[n], float), det) for t in nominal], det.target_rate, det.margin,
                      det.safety, heldout=[_processed(np.asarray(t[n], float), det) for t in heldout] or None)
        for n in names
    }
    report = DetectionReport(sig, tunings=tunings)
    summary: dict = {"tunings": {n: asdict(t) for n, t in tunings.items()}, "scenarios": []}
    pooled = {n: np.concatenate([_processed(np.asarray(t[n], float), det) for t in nominal]) for n in names}
    traces = {}
    for name, fault, onset, table in scenarios:
        time = np.asarray(table["time"], float)
        post = time[det.warmup:] >= onset
        times, delays, pattern = {}, {}, []
        trace = {"time": time[det.warmup:]}
        for n in names:
            r = _processed(np.asarray(table[n], float), det)
            cr = run_cusum(r, tunings[n])
            trace[f"{n}_pos"], trace[f"{n}_neg"] = cr.t_pos, cr.t_neg
            at = None if cr.alarm_time is None else cr.alarm_time + det.warmup
            times[n] = at
            delays[n] = None if at is None else float(time[at] - onset)
            pattern.append(at is not None)
            if post.any():
                report.auc_tables.setdefault(n, {})[name] = [AUCRow(float("nan"), roc_auc(pooled[n], r[post]))]
        ranked = diagnose(np.array(pattern), sig)
        report.alarm_times[name] = times
        report.diagnoses[name] = ranked
        traces[name] = trace
        summary["scenarios"].append({"name": name, "fault": fault, "onset": onset, "alarm_times": times,
                                     "delays": delays, "pattern": pattern, "diagnosis": ranked})
    return report, summary, traces
