"""End-to-end workflow: query, select, pretrain, DP fine-tune, synthesize, evaluate."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from . import data as dataio
from . import generative as gen
from . import metrics
from . import semantics as sem
from .accountant import BudgetLedger, Charge, PrivacyBudget, calibrate_sigma1, total_epsilon
from .data import LabeledDataset, ToyWorldSpec, make_toy_world
from .dpcore import NoiseSource

log = logging.getLogger(__name__)

STAGES = (
    "config", "data", "train-sqf", "query-sd", "select", "pretrain",
    "calibrate", "finetune", "synth", "eval",
)
EXIT_CODES = {name: 2 + i for i, name in enumerate(STAGES)}


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException | str):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage!r} failed: {cause}")

    @property
    def exit_code(self) -> int:
        return EXIT_CODES[self.stage]


@dataclass
class PipelineConfig:
    # data; "toy" builds the synthetic world from toy_seed
    data: str = "toy"
    public_path: str = ""
    sensitive_path: str = ""
    sensitive_test_path: str = ""
    vocab: str = ""  # comma-separated names for file-based public data
    toy_seed: int = 0
    toy_overlap: str = "0,1"
    toy_n_semantics: int = 10
    run_dir: str = "run"
    # semantic query
    k: int = 1
    k1: int = 0  # 0: use k
    k2: int = 0  # 0: use k
    sigma2: float = 10.0
    conditional: bool = True
    sqf_hidden: int = 32
    sqf_epochs: int = 60
    sqf_lr: float = 0.5
    # privacy
    epsilon: float = 10.0
    delta: float = 1e-5
    # model
    model: str = "diffusion"
    hidden: int = 64
    latent_dim: int = 8
    T: int = 100
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    pretrain_epochs: int = 0  # 0: derive from pretrain_steps
    pretrain_steps: int = 2000
    pretrain_lr: float = 0.05
    pretrain_batch: int = 64
    update_ratio: int = 5
    # fine-tuning
    max_steps: int = 200
    batch_size: int = 64
    clip_norm: float = 1.0
    eta: float = 0.1
    sigma1: float = 0.0  # 0: calibrate from the budget
    # synthesis and evaluation
    sampler_steps: int = 50
    n_synth: int = 500
    ca_model: str = "linear"
    seed: int = 0

    def __post_init__(self):
        if self.k < 1 or self.k1 < 0 or self.k2 < 0:
            raise ValueError("k must be >= 1")
        PrivacyBudget(self.epsilon, self.delta)
        if self.model not in ("diffusion", "gan"):
            raise ValueError(f"unknown model kind {self.model!r}")
        if self.data not in ("toy", "files"):
            raise ValueError("data must be 'toy' or 'files'")

    @property
    def k1_(self) -> int:
        return self.k1 or self.k

    @property
    def k2_(self) -> int:
        return self.k2 or self.k

    @property
    def budget(self) -> PrivacyBudget:
        return PrivacyBudget(self.epsilon, self.delta)

    def toy_spec(self) -> ToyWorldSpec:
        overlap = tuple(int(s) for s in self.toy_overlap.split(",") if s.strip())
        return ToyWorldSpec(n_semantics=self.toy_n_semantics, overlap=overlap)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))


def _coerce(text: str, kind: Any):
    kind = kind if isinstance(kind, str) else kind.__name__
    if kind == "bool":
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if kind == "int":
        return int(text)
    if kind == "float":
        return float(text)
    return text


def parse_config(text: str, **overrides) -> PipelineConfig:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    types = {f.name: f.type for f in fields(PipelineConfig)}
    values: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in types:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(val, types[key])
    values.update({k: v for k, v in overrides.items() if v is not None})
    return PipelineConfig(**values)


def load_config(path, **overrides) -> PipelineConfig:
    return parse_config(Path(path).read_text(), **overrides)


# --- data access -----------------------------------------------------------


@dataclass
class Sources:
    public: LabeledDataset
    vocab: sem.SemanticVocabulary
    sensitive: LabeledDataset = field(repr=False)
    sensitive_test: LabeledDataset | None = field(default=None, repr=False)


def load_sources(cfg: PipelineConfig) -> Sources:
    if cfg.data == "toy":
        world = make_toy_world(cfg.toy_seed, cfg.toy_spec())
        return Sources(
            world.public,
            sem.SemanticVocabulary(world.vocab_names),
            world.sensitive["train"],
            world.sensitive["test"],
        )

    def read(path):
        return dataio.load_csv(path) if str(path).endswith(".csv") else dataio.load(path)

    public = read(cfg.public_path)
    names = [s.strip() for s in cfg.vocab.split(",") if s.strip()]
    if not names:
        names = [f"sem{i}" for i in range(public.n_semantics or 0)]
    test = read(cfg.sensitive_test_path) if cfg.sensitive_test_path else None
    return Sources(public, sem.SemanticVocabulary(tuple(names)), read(cfg.sensitive_path), test)


# --- stages ----------------------------------------------------------------


def stage_train_sqf(cfg: PipelineConfig, public: LabeledDataset, vocab) -> sem.SqfModel:
    sqf_cfg = sem.SqfConfig(cfg.sqf_hidden, cfg.sqf_epochs, cfg.sqf_lr, None, cfg.seed)
    return sem.train_sqf(public, vocab, sqf_cfg)


def stage_query(cfg: PipelineConfig, Q, sensitive: LabeledDataset, ledger: BudgetLedger, noise: NoiseSource):
    """Build and release the semantic distribution(s); the only pre-training read of sensitive data."""
    ns = Q.net.out_dim
    if cfg.conditional:
        raw = sem.conditional_distributions(Q, sensitive, cfg.k1_, n_semantics=ns)
        return sem.release_conditional(raw, cfg.sigma2, noise, ledger)
    raw = sem.build_distribution(Q, sensitive, cfg.k1_, ns)
    return sem.release_distribution(raw, cfg.sigma2, noise, ledger)


def stage_select(cfg: PipelineConfig, noisy, public: LabeledDataset):
    if isinstance(noisy, dict):
        desc = sem.select_conditional(noisy, cfg.k2_)
    else:
        desc = sem.select_description(noisy, cfg.k2_)
    return desc, sem.select_pretraining_data(public, desc)


def build_model(cfg: PipelineConfig, pretrain_data: LabeledDataset, n_classes: int) -> gen.GenerativeModel:
    center, scale = gen.fit_normalizer(pretrain_data) if len(pretrain_data) > 1 else (None, None)
    if cfg.model == "diffusion":
        sched = gen.make_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
        return gen.make_diffusion_model(pretrain_data.dim, cfg.hidden, n_classes, sched, cfg.seed, center, scale)
    return gen.make_gan_model(pretrain_data.dim, cfg.latent_dim, cfg.hidden, n_classes, cfg.seed, center, scale)


def stage_pretrain(cfg: PipelineConfig, model: gen.GenerativeModel, data: LabeledDataset, history=None):
    epochs = cfg.pretrain_epochs
    if not epochs:
        epochs = max(1, int(np.ceil(cfg.pretrain_steps * cfg.pretrain_batch / max(len(data), 1))))
    pcfg = gen.PretrainConfig(epochs, cfg.pretrain_lr, cfg.pretrain_batch, cfg.seed, cfg.update_ratio)
    return gen.pretrain(model, data, pcfg, history)


def finetune_config(cfg: PipelineConfig, n_sensitive: int, sigma1: float) -> gen.FineTuneConfig:
    return gen.FineTuneConfig(
        clip_norm=cfg.clip_norm,
        batch_size=cfg.batch_size,
        eta=cfg.eta,
        sigma1=sigma1,
        max_steps=cfg.max_steps,
        sample_rate=min(1.0, cfg.batch_size / n_sensitive),
        update_ratio=cfg.update_ratio,
    )


def stage_calibrate(cfg: PipelineConfig, n_sensitive: int) -> float:
    if cfg.sigma1 > 0:
        return cfg.sigma1
    q = min(1.0, cfg.batch_size / n_sensitive)
    return calibrate_sigma1(cfg.budget, cfg.max_steps, q, cfg.sigma2)


def new_ledger(cfg: PipelineConfig) -> BudgetLedger:
    return BudgetLedger(delta=cfg.delta, target=cfg.budget)


def evaluate(
    cfg: PipelineConfig,
    synthetic: LabeledDataset,
    reference: LabeledDataset,
    test: LabeledDataset | None,
) -> dict[str, float]:
    out = {"frechet": metrics.frechet_between(synthetic.features, reference.features)}
    if (
        test is not None
        and synthetic.labels is not None
        and test.labels is not None
        and synthetic.n_classes == test.n_classes
    ):
        out["ca"] = metrics.classification_accuracy(synthetic, test, cfg.ca_model, seed=cfg.seed)
    return out


def selection_sds(noisy, selected: LabeledDataset, public: LabeledDataset, vocab, table) -> dict[str, float]:
    """SDS of the selected and of the full public data against the released distribution."""
    counts = sum(v.counts for v in noisy.values()) if isinstance(noisy, dict) else noisy.counts
    w = np.clip(counts, 0.0, None)
    names = list(vocab.names)
    if w.sum() == 0 or not all(n in table for n in names):
        return {}
    keep = np.flatnonzero(w)
    sw, sn = w[keep], [names[i] for i in keep]
    out = {}
    for tag, ds in (("sds_selected", selected), ("sds_full", public)):
        if len(ds):
            fw, fn = metrics.semantic_frequencies(ds.semantic_labels, names)
            out[tag] = metrics.sds(sw, sn, fw, fn, table)
    return out


# --- reporting -------------------------------------------------------------


def report(ledger: BudgetLedger, bundle: dict[str, Any]) -> tuple[str, str]:
    """Human-readable text and a ``metric,value`` CSV."""
    rows: dict[str, Any] = {
        "epsilon": ledger.epsilon(),
        "delta": ledger.delta,
        "charges": len(ledger.charges),
        "sgm_charges": ledger.count("sgm"),
        "query_charges": ledger.count("gaussian_query"),
    }
    if ledger.charges:
        rows["best_order"] = ledger.best_order()
    rows.update(bundle)
    text = io.StringIO()
    text.write("privsynth run report\n")
    for k, v in rows.items():
        text.write(f"{k} = {_fmt(v)}\n")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "value"])
    for k, v in rows.items():
        w.writerow([k, _fmt(v)])
    return text.getvalue(), buf.getvalue()


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def parse_report_csv(text: str) -> dict[str, str]:
    rows = list(csv.reader(io.StringIO(text)))
    return {k: v for k, v in rows[1:]}


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(run_dir: Path, cfg: PipelineConfig) -> None:
    entries = {
        p.name: _digest(p) for p in sorted(run_dir.iterdir()) if p.is_file() and p.name != "manifest.json"
    }
    manifest = {"config": dataclasses.asdict(cfg), "artifacts": entries}
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


# --- the whole workflow ----------------------------------------------------


@dataclass
class RunResult:
    synthetic: LabeledDataset
    ledger: BudgetLedger
    report_text: str
    report_csv: str
    values: dict[str, Any]


def _stage(name):
    def wrap(fn, *args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except StageError:
            raise
        except Exception as exc:  # any failure is reported with its stage
            raise StageError(name, exc) from exc

    return wrap


def plan(cfg: PipelineConfig) -> dict[str, Any]:
    """Dry run: calibrated noise and expected selection ratio, no training and no budget spent.

    The realised selection depends on the noisy release, so the ratio is
    reported as the range over every possible top-k2 description.
    """
    src = _stage("data")(load_sources, cfg)
    n = len(src.sensitive)
    sigma1 = _stage("calibrate")(stage_calibrate, cfg, n)
    q = min(1.0, cfg.batch_size / n)
    eps, order = total_epsilon(sigma1, cfg.max_steps, q, cfg.sigma2, cfg.delta)
    freq = np.bincount(src.public.semantic_labels, minlength=len(src.vocab)) / max(len(src.public), 1)
    srt = np.sort(freq)
    k2 = min(cfg.k2_, len(srt))
    # per-category descriptions may each pick different semantics
    k2_max = min(k2 * int(src.sensitive.n_classes or 1), len(srt)) if cfg.conditional else k2
    return {
        "stages": " -> ".join(STAGES[2:]),
        "sigma1": sigma1,
        "sigma2": cfg.sigma2,
        "sample_rate": q,
        "max_steps": cfg.max_steps,
        "epsilon": eps,
        "best_order": order,
        "selection_ratio_min": float(srt[:k2].sum()),
        "selection_ratio_max": float(srt[::-1][:k2_max].sum()),
    }


def run_pipeline(cfg: PipelineConfig, write: bool = True) -> RunResult:
    root = NoiseSource(cfg.seed)
    src = _stage("data")(load_sources, cfg)
    sensitive = src.sensitive
    ledger = new_ledger(cfg)
    n_sens = len(sensitive)
    # infeasible budgets abort before anything is trained
    sigma1 = _stage("calibrate")(stage_calibrate, cfg, n_sens)
    _stage("calibrate")(
        ledger.check,
        [Charge("gaussian_query", float(cfg.sigma2))]
        + [Charge("sgm", float(sigma1), min(1.0, cfg.batch_size / n_sens))] * cfg.max_steps,
    )

    Q = _stage("train-sqf")(stage_train_sqf, cfg, src.public, src.vocab)
    noisy = _stage("query-sd")(stage_query, cfg, Q, sensitive, ledger, root.spawn(1))
    desc, selected = _stage("select")(stage_select, cfg, noisy, src.public)

    n_classes = int(sensitive.n_classes or 0) if cfg.conditional else 0
    model = _stage("pretrain")(build_model, cfg, selected if len(selected) > 1 else src.public, n_classes)
    model = _stage("pretrain")(stage_pretrain, cfg, model, selected)
    ft = finetune_config(cfg, n_sens, sigma1)
    model = _stage("finetune")(gen.finetune_dp, model, sensitive, ft, root.spawn(2), ledger)
    synthetic = _stage("synth")(gen.synthesize, model, cfg.n_synth, None, cfg.sampler_steps, root.spawn(3))

    table = dataio.load_embeddings()
    reference = src.sensitive_test if src.sensitive_test is not None else sensitive
    values: dict[str, Any] = {
        "sigma1": sigma1,
        "sigma2": cfg.sigma2,
        "k1": cfg.k1_,
        "k2": cfg.k2_,
        "max_steps": cfg.max_steps,
        "n_selected": len(selected),
        "selection_ratio": len(selected) / max(len(src.public), 1),
        "selected": " ".join(src.vocab.names[i] for i in sorted(desc.selected)),
    }
    values.update(_stage("eval")(selection_sds, noisy, selected, src.public, src.vocab, table))
    values.update(_stage("eval")(evaluate, cfg, synthetic, reference, src.sensitive_test))
    text, csv_text = report(ledger, values)
    if write:
        out = Path(cfg.run_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(cfg.to_text())
        dataio.save(out / "synthetic.bin", synthetic)
        gen.save_model(out / "model.ckpt", model)
        (out / "ledger.json").write_text(ledger.to_json())
        if isinstance(noisy, dict):
            for c, sd in noisy.items():
                sem.write_sd_table(out / f"sd_{c}.csv", sd, src.vocab)
        else:
            sem.write_sd_table(out / "sd.csv", noisy, src.vocab)
        (out / "report.txt").write_text(text)
        (out / "report.csv").write_text(csv_text)
        write_manifest(out, cfg)
    return RunResult(synthetic, ledger, text, csv_text, values)

