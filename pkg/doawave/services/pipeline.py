"""
doawave — Pipeline Service
Stage graph, named sub-seeds, per-utterance stage workers and the resumable
run loop that emits the DOA, separation, gradient and summary reports.
"""

import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import networkx as nx
import numpy as np

from errors import ConfigError, DoawaveError
from models import (
    BeamformerKind,
    DescentRow,
    DoaMethod,
    DoaRow,
    ExperimentConfig,
    GradcheckRow,
    MaskSource,
    MixtureEntry,
    SeparationRow,
    SimulationConfig,
    Stage,
    StageMarker,
    StageStatus,
)
from services import audit_logger
from services.beamform import apply_beamformer, beamform_all, ibm, ilm, localization_mask
from services.doa import estimate_doa, posterior_entropy_bits
from services.geometry import steering_tensor
from services.gradcheck import ChainProblem, chain_loss, descend_doa, grad_analytic, grad_fd, relative_error
from services.metrics import permutation_min_doa_error, separation_report
from services.plotting import plot_masks, plot_spatial_spectrum
from services.report import build_report, write_report, write_rows
from services.run_manifest import (
    DATASET_FILE,
    append_marker,
    completed,
    failure_counts,
    read_dataset,
    write_dataset,
)
from services.signals import MultichannelSpectrogram, Waveform, istft, read_wav, stft, write_wav
from services.simulate import (
    MixtureRecord,
    load_dry_corpus,
    make_dry_signal,
    sample_scenario,
    synthesize_mixture,
)

logger = logging.getLogger(__name__)

STAGE_DEPENDENCIES = {
    Stage.SIMULATE: [],
    Stage.DOA: [Stage.SIMULATE],
    Stage.SEPARATE: [Stage.SIMULATE],
    Stage.GRADCHECK: [],
    Stage.REPORT: [Stage.DOA, Stage.SEPARATE, Stage.GRADCHECK],
}

# failures of a single item; anything else aborts the run
ITEM_ERRORS = (DoawaveError, np.linalg.LinAlgError, ValueError, OSError)


# ── Seeds ───────────────────────────────────────────────────────────

MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def _fnv1a(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) & MASK64
    return h


def sub_seed(master: int, index: int, name: str) -> int:
    """64-bit seed for (master seed, item index, stage name)."""
    h = splitmix64(master & MASK64)
    h = splitmix64(h ^ (index & MASK64))
    return splitmix64(h ^ _fnv1a(name))


def utterance_id(index: int) -> str:
    return f"utt{index:04d}"


def scenario_id(index: int) -> str:
    return f"gc{index:04d}"


# ── Stage graph ─────────────────────────────────────────────────────


def stage_graph() -> nx.DiGraph:
    g = nx.DiGraph()
    for stage, deps in STAGE_DEPENDENCIES.items():
        g.add_node(stage)
        for dep in deps:
            g.add_edge(dep, stage)
    return g


def stage_order(requested) -> list[Stage]:
    """Requested stages in dependency order; ties keep the declaration order."""
    order = list(Stage)
    sub = stage_graph().subgraph([Stage(s) for s in requested])
    return list(nx.lexicographical_topological_sort(sub, key=order.index))


# ── Paths and fingerprints ──────────────────────────────────────────


@dataclass(frozen=True)
class RunPaths:
    run_dir: Path
    dataset: Path
    doa_csv: Path
    separation_csv: Path
    gradcheck_csv: Path
    descent_csv: Path
    report_csv: Path
    report_txt: Path
    separated_dir: Path

    @classmethod
    def under(cls, run_dir, **overrides) -> "RunPaths":
        run_dir = Path(run_dir)
        paths = cls(
            run_dir=run_dir,
            dataset=run_dir / DATASET_FILE,
            doa_csv=run_dir / "doa.csv",
            separation_csv=run_dir / "separation.csv",
            gradcheck_csv=run_dir / "gradcheck.csv",
            descent_csv=run_dir / "descent.csv",
            report_csv=run_dir / "report.csv",
            report_txt=run_dir / "report.txt",
            separated_dir=run_dir / "separated",
        )
        return replace(paths, **{k: Path(v) for k, v in overrides.items() if v is not None})

    @property
    def data_dir(self) -> Path:
        return self.dataset.parent

    def results(self, stage: Stage, fingerprint: str) -> Path:
        return self.run_dir / "results" / f"{stage.value}-{fingerprint}"

    def resolve(self, path) -> Path:
        path = Path(path)
        return path if path.is_absolute() else self.run_dir / path


def fingerprint(cfg: ExperimentConfig, stage: Stage) -> str:
    """Short hash of everything that can change a stage's numbers."""
    parts = {
        "seed": cfg.seed,
        "simulation": cfg.simulation.model_dump(mode="json"),
        "array": cfg.array.model_dump(mode="json"),
    }
    if stage in (Stage.DOA, Stage.SEPARATE, Stage.GRADCHECK):
        parts["stft"] = cfg.stft.model_dump(mode="json")
    if stage in (Stage.DOA, Stage.SEPARATE):
        parts["doa"] = cfg.doa.model_dump(mode="json", exclude={"spectrum_svg_dir"})
    if stage in (Stage.SEPARATE, Stage.GRADCHECK):
        parts["separation"] = cfg.separation.model_dump(mode="json", exclude={"write_wavs", "mask_plot_format"})
    if stage == Stage.GRADCHECK:
        parts["gradcheck"] = cfg.gradcheck.model_dump(mode="json")
    blob = json.dumps(parts, sort_keys=True)
    return hashlib.sha1(blob.encode("utf-8")).hexdigest()[:10]


# ── Signals for an item ─────────────────────────────────────────────


def _dry_signals(sim: SimulationConfig, master: int, index: int, n_sources: int,
                 prefix: str = "dry") -> list[Waveform]:
    if sim.dry_dir:
        return load_dry_corpus(sim.dry_dir, sub_seed(master, index, prefix), n_sources,
                               sim.duration_s, sim.sample_rate)
    return [make_dry_signal(sub_seed(master, index, f"{prefix}{n}"), sim.duration_s, sim.sample_rate)
            for n in range(n_sources)]


def load_record(entry: MixtureEntry, base: Path) -> MixtureRecord:
    mixture = read_wav(base / entry.mixture_path)
    references = [read_wav(base / p) for p in entry.reference_paths]
    dry = [read_wav(base / p).channel(0) for p in entry.dry_paths]
    return MixtureRecord(mixture, references, dry, np.radians(entry.truth_doas_deg), entry.scenario)


def _reference_channel_estimates(outputs: list[MultichannelSpectrogram], kind: BeamformerKind,
                                 spec: MultichannelSpectrogram, geom, thetas, ref_channel: int,
                                 length: int) -> list[Waveform]:
    """Time-domain outputs; LCMP/MVDR outputs are moved from the array center to the reference mic."""
    if kind != BeamformerKind.MVDR_REF:
        d_ref = steering_tensor(geom, thetas, spec.freqs)[:, ref_channel, :]  # (F, N)
        outputs = [MultichannelSpectrogram(x.data * d_ref[:, n][None, None, :], x.config, x.sample_rate)
                   for n, x in enumerate(outputs)]
    return [istft(x, length).channel(0) for x in outputs]


# ── Stage workers ───────────────────────────────────────────────────


def _simulate_item(cfg: ExperimentConfig, paths: RunPaths, index: int) -> dict:
    uid = utterance_id(index)
    sim = cfg.simulation
    geom = cfg.array.to_geometry()
    scenario = sample_scenario(sub_seed(cfg.seed, index, "simulate"), sim, geom)
    record = synthesize_mixture(scenario, _dry_signals(sim, cfg.seed, index, scenario.n_sources))

    rel = Path("wav") / uid
    write_wav(paths.data_dir / rel / "mixture.wav", record.mixture)
    ref_paths, dry_paths = [], []
    for n, (ref, dry) in enumerate(zip(record.references, record.dry)):
        ref_paths.append(str(rel / f"ref_{n}.wav"))
        dry_paths.append(str(rel / f"dry_{n}.wav"))
        write_wav(paths.data_dir / ref_paths[-1], ref)
        write_wav(paths.data_dir / dry_paths[-1], dry)

    entry = MixtureEntry(
        utterance_id=uid, index=index, seed=scenario.seed, scenario=scenario,
        truth_doas_deg=[float(a) for a in np.degrees(record.truth_doas)],
        sample_rate=record.mixture.sample_rate, mixture_path=str(rel / "mixture.wav"),
        reference_paths=ref_paths, dry_paths=dry_paths,
    )
    return entry.model_dump(mode="json")


def _doa_item(cfg: ExperimentConfig, paths: RunPaths, entry: MixtureEntry) -> dict:
    record = load_record(entry, paths.data_dir)
    spec = stft(record.mixture, cfg.stft)
    geom = entry.scenario.geometry
    truth = record.truth_doas
    rows = []
    for method in cfg.doa.methods:
        for gamma in cfg.doa.gammas:
            spectrum, peaks, posterior, interp = estimate_doa(spec, geom, method, gamma, truth.size, cfg.doa)
            for estimator, est, entropy in (("peak", peaks, None),
                                            ("posterior", interp, posterior_entropy_bits(posterior))):
                err = permutation_min_doa_error(est.thetas, truth)
                rows.append(DoaRow(
                    utterance_id=entry.utterance_id, method=method, estimator=estimator, gamma=gamma,
                    truth_deg=list(entry.truth_doas_deg),
                    estimate_deg=[float(a) for a in est.thetas_deg],
                    permutation=list(err.permutation), errors_deg=list(err.errors_deg),
                    mean_error_deg=err.mean_error_deg, fallback=peaks.fallback,
                    posterior_entropy_bits=entropy,
                ))
            if cfg.doa.spectrum_svg_dir:
                plot_spatial_spectrum(
                    spectrum,
                    paths.resolve(cfg.doa.spectrum_svg_dir) / f"{entry.utterance_id}_{method.value}_g{gamma:g}.svg",
                    truth=truth, estimate=interp.thetas, posterior=posterior.probs,
                    title=f"{entry.utterance_id} {method.value} gamma={gamma:g}",
                )
    return {"rows": [r.model_dump(mode="json") for r in rows]}


def _masks_for(spec, geom, thetas, truth, ref_specs, sep) -> dict:
    masks = {}
    for source in sep.masks:
        if source == MaskSource.ESTIMATED:
            masks[source] = localization_mask(spec, geom, thetas, sep.kappa)
        elif source == MaskSource.ILM:
            masks[source] = ilm(spec, geom, truth, sep.kappa)
        else:
            masks[source] = ibm(ref_specs, sep.ref_channel)
    return masks


def _separate_item(cfg: ExperimentConfig, paths: RunPaths, entry: MixtureEntry) -> dict:
    sep = cfg.separation
    record = load_record(entry, paths.data_dir)
    spec = stft(record.mixture, cfg.stft)
    geom = entry.scenario.geometry
    truth = record.truth_doas
    ref_specs = [stft(r, cfg.stft) for r in record.references]

    rows = []
    for doa_source in sep.doa_sources:
        if doa_source == DoaMethod.ORACLE:
            thetas = truth
        else:
            thetas = estimate_doa(spec, geom, doa_source, sep.doa_gamma, truth.size, cfg.doa)[3].thetas
        masks = _masks_for(spec, geom, thetas, truth, ref_specs, sep)

        for kind in sep.beamformers:
            shared = None  # LCMP ignores the mask, so one solve serves every mask row
            for mask_source, mask in masks.items():
                if kind == BeamformerKind.LCMP and shared is not None:
                    estimates, report, diag = shared
                else:
                    weights, diag = beamform_all(spec, geom, kind, thetas, mask, sep.ref_channel,
                                                 sep.diagonal_loading)
                    estimates = _reference_channel_estimates(
                        apply_beamformer(spec, weights), kind, spec, geom, thetas, sep.ref_channel,
                        record.mixture.n_samples,
                    )
                    report = separation_report(estimates, record, sep.reference_kind, sep.ref_channel)
                    shared = (estimates, report, diag)

                tag = f"{kind.value}_{doa_source.value}_{mask_source.value}"
                for n in range(len(estimates)):
                    rows.append(SeparationRow(
                        utterance_id=entry.utterance_id, beamformer=kind, doa=doa_source,
                        mask=mask_source, reference_kind=sep.reference_kind, source=n,
                        si_sdr_db=report.si_sdr_db[n], mixture_si_sdr_db=report.mixture_si_sdr_db[n],
                        improvement_db=report.improvement_db[n],
                        mask_fallback_bins=diag["mask_fallback_bins"],
                        degenerate_bins=diag["degenerate_bins"],
                    ))
                    if sep.write_wavs:
                        write_wav(paths.separated_dir / entry.utterance_id / f"{tag}_s{n}.wav",
                                  estimates[report.assignment[n]])

        if sep.mask_plot_format and doa_source == sep.doa_sources[0]:
            plot_masks(
                paths.resolve("masks") / f"{entry.utterance_id}_s0.{sep.mask_plot_format}",
                np.abs(ref_specs[0].data[:, sep.ref_channel, :]),
                {m.value: v for m, v in masks.items()},
                source=0, sample_rate=spec.sample_rate, hop=cfg.stft.hop,
            )
    return {"rows": [r.model_dump(mode="json") for r in rows]}


def _gradcheck_item(cfg: ExperimentConfig, paths: RunPaths, index: int) -> dict:
    gc = cfg.gradcheck
    sid = scenario_id(index)
    geom = cfg.array.to_geometry()
    sim = cfg.simulation.model_copy(update={"duration_s": gc.duration_s})
    scenario = sample_scenario(sub_seed(cfg.seed, index, "gradcheck"), sim, geom)
    if gc.anechoic:
        scenario = scenario.model_copy(update={"max_order": 0})
    record = synthesize_mixture(scenario, _dry_signals(sim, cfg.seed, index, scenario.n_sources, "gradcheck-dry"))

    ref_channel = cfg.separation.ref_channel
    problem = ChainProblem(
        spec=stft(record.mixture, cfg.stft),
        references=np.stack([stft(r, cfg.stft).data[:, ref_channel, :] for r in record.references]),
        geometry=geom, kind=gc.beamformer, kappa=gc.kappa, ref_channel=ref_channel,
        delta=cfg.separation.diagonal_loading,
    )
    truth = record.truth_doas
    rng = np.random.default_rng(sub_seed(cfg.seed, index, "gradcheck-draws"))

    rows = []
    for draw in range(gc.draws):
        offsets = np.radians(rng.uniform(-gc.perturb_deg, gc.perturb_deg, size=truth.size))
        theta = np.mod(truth + offsets, 2 * math.pi)
        loss = chain_loss(theta, problem)
        analytic = grad_analytic(theta, problem, loss.assignment)
        numeric = grad_fd(theta, problem, loss.assignment, gc.step)
        rel = relative_error(analytic, numeric)
        for k in range(theta.size):
            rows.append(GradcheckRow(
                scenario_id=sid, draw=draw, parameter=k,
                theta_deg=[float(a) for a in np.degrees(theta)],
                analytic=float(analytic[k]), finite_difference=float(numeric[k]),
                relative_error=float(rel[k]), kink=loss.near_kink(gc.kink_tol),
            ))

    init = np.mod(truth + math.radians(gc.descent_offset_deg), 2 * math.pi)
    trace = descend_doa(init, problem, gc.descent_steps, gc.learning_rate)
    err = permutation_min_doa_error(trace.estimate.thetas, truth)
    descent = DescentRow(
        scenario_id=sid, truth_deg=[float(a) for a in np.degrees(truth)],
        init_deg=[float(a) for a in np.degrees(init)],
        final_deg=[float(a) for a in trace.estimate.thetas_deg],
        final_error_deg=err.mean_error_deg, steps=trace.steps,
        initial_loss=trace.losses[0], final_loss=trace.losses[-1],
    )
    return {"rows": [r.model_dump(mode="json") for r in rows], "descent": descent.model_dump(mode="json")}


STAGE_WORKERS = {
    Stage.SIMULATE: _simulate_item,
    Stage.DOA: _doa_item,
    Stage.SEPARATE: _separate_item,
    Stage.GRADCHECK: _gradcheck_item,
}


def _run_item(stage: Stage, cfg: ExperimentConfig, paths: RunPaths, item_id: str, payload,
              fp: str) -> tuple[str, StageStatus, str]:
    audit_logger.bind_run_dir(paths.run_dir)
    target = paths.results(stage, fp) / f"{item_id}.json"
    try:
        with audit_logger.AuditContext(item_id, stage.value, f"services.pipeline.{stage.value}",
                                       f"config {fp}") as audit:
            result = STAGE_WORKERS[stage](cfg, paths, payload)
            audit.set_output(f"{len(result['rows'])} rows" if "rows" in result else "mixture written")
    except ITEM_ERRORS as exc:
        logger.warning("%s %s failed: %s", stage.value, item_id, exc)
        return item_id, StageStatus.FAILED, f"{type(exc).__name__}: {exc}"

    tmp = target.with_suffix(".tmp")
    tmp.write_text(json.dumps(result, sort_keys=True), encoding="utf-8")
    tmp.replace(target)
    return item_id, StageStatus.DONE, ""


# ── Run loop ────────────────────────────────────────────────────────


@dataclass
class StageOutcome:
    stage: Stage
    fingerprint: str
    done: list[str] = field(default_factory=list)
    failed: dict[str, str] = field(default_factory=dict)
    skipped: int = 0


@dataclass
class PipelineResult:
    exit_code: int
    outcomes: list[StageOutcome] = field(default_factory=list)
    outputs: dict[str, Path] = field(default_factory=dict)
    report_text: str = ""

    @property
    def failures(self) -> dict[str, int]:
        return {o.stage.value: len(o.failed) for o in self.outcomes if o.failed}


def run_stage(stage: Stage, cfg: ExperimentConfig, paths: RunPaths, items: list[tuple[str, object]]) -> StageOutcome:
    """Run the items not yet done for this configuration; markers are appended in item order."""
    fp = fingerprint(cfg, stage)
    result_dir = paths.results(stage, fp)
    result_dir.mkdir(parents=True, exist_ok=True)
    finished = completed(paths.run_dir, stage, fp)
    todo = [(i, p) for i, p in items if not (i in finished and (result_dir / f"{i}.json").exists())]
    outcome = StageOutcome(stage, fp, skipped=len(items) - len(todo))

    for item_id, _ in todo:
        append_marker(paths.run_dir, StageMarker(utterance_id=item_id, stage=stage,
                                                 status=StageStatus.STARTED, fingerprint=fp))
    if cfg.jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            futures = [pool.submit(_run_item, stage, cfg, paths, i, p, fp) for i, p in todo]
            results = [f.result() for f in futures]
    else:
        results = [_run_item(stage, cfg, paths, i, p, fp) for i, p in todo]

    for item_id, status, detail in results:
        append_marker(paths.run_dir, StageMarker(utterance_id=item_id, stage=stage, status=status,
                                                 fingerprint=fp, detail=detail))
        if status == StageStatus.FAILED:
            outcome.failed[item_id] = detail
    outcome.done = [i for i, _ in items if i not in outcome.failed]
    if outcome.skipped:
        logger.info("%s: %d items already done, skipped", stage.value, outcome.skipped)
    return outcome


def _load_results(paths: RunPaths, outcome: StageOutcome) -> list[dict]:
    folder = paths.results(outcome.stage, outcome.fingerprint)
    return [json.loads((folder / f"{i}.json").read_text(encoding="utf-8")) for i in outcome.done]


def _dataset(paths: RunPaths) -> list[MixtureEntry]:
    try:
        return read_dataset(paths.dataset)
    except FileNotFoundError as exc:
        raise ConfigError(f"{exc}; run the simulate stage first") from exc


def run_pipeline(cfg: ExperimentConfig, paths: RunPaths | None = None, stages=None) -> PipelineResult:
    """Run the requested stages in dependency order; rerunning skips finished work.

    Item failures are recorded and counted; the exit code is 1 when any item failed.
    """
    paths = paths or RunPaths.under(cfg.out_dir)
    paths.run_dir.mkdir(parents=True, exist_ok=True)
    audit_logger.bind_run_dir(paths.run_dir)
    result = PipelineResult(exit_code=0)

    for stage in stage_order(stages or cfg.stages):
        if stage == Stage.SIMULATE:
            items = [(utterance_id(i), i) for i in range(cfg.simulation.count)]
            outcome = run_stage(stage, cfg, paths, items)
            entries = [MixtureEntry.model_validate(d) for d in _load_results(paths, outcome)]
            result.outputs["dataset"] = write_dataset(paths.dataset, entries)
            print(f"✅ Simulated {len(entries)} mixtures -> {paths.dataset}")

        elif stage == Stage.DOA:
            items = [(e.utterance_id, e) for e in _dataset(paths)]
            outcome = run_stage(stage, cfg, paths, items)
            rows = [DoaRow.model_validate(r) for d in _load_results(paths, outcome) for r in d["rows"]]
            result.outputs["doa"] = write_rows(paths.doa_csv, rows, DoaRow)
            print(f"✅ DOA: {len(rows)} rows -> {paths.doa_csv}")

        elif stage == Stage.SEPARATE:
            items = [(e.utterance_id, e) for e in _dataset(paths)]
            outcome = run_stage(stage, cfg, paths, items)
            rows = [SeparationRow.model_validate(r) for d in _load_results(paths, outcome) for r in d["rows"]]
            result.outputs["separation"] = write_rows(paths.separation_csv, rows, SeparationRow)
            print(f"✅ Separation: {len(rows)} rows -> {paths.separation_csv}")

        elif stage == Stage.GRADCHECK:
            items = [(scenario_id(j), j) for j in range(cfg.gradcheck.scenarios)]
            outcome = run_stage(stage, cfg, paths, items)
            loaded = _load_results(paths, outcome)
            rows = [GradcheckRow.model_validate(r) for d in loaded for r in d["rows"]]
            descent = [DescentRow.model_validate(d["descent"]) for d in loaded]
            result.outputs["gradcheck"] = write_rows(paths.gradcheck_csv, rows, GradcheckRow)
            result.outputs["descent"] = write_rows(paths.descent_csv, descent, DescentRow)
            print(f"✅ Gradient check: {len(rows)} rows -> {paths.gradcheck_csv}")

        else:
            result.report_text = assemble_report(paths, cfg.separation.ref_channel)
            result.outputs["report"] = paths.report_csv
            print(f"✅ Report -> {paths.report_csv}")
            continue

        result.outcomes.append(outcome)
        if outcome.failed:
            print(f"⚠️  {stage.value}: {len(outcome.failed)} of {len(items)} items failed")

    if result.failures:
        result.exit_code = 1
    return result


def assemble_report(paths: RunPaths, ref_channel: int = 1) -> str:
    rows = build_report(paths.doa_csv, paths.separation_csv, paths.gradcheck_csv, paths.descent_csv,
                        failures=failure_counts(paths.run_dir), ref_channel=ref_channel)
    return write_report(rows, paths.report_csv, paths.report_txt)
