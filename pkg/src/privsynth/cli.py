"""``privsynth`` command line.

Every subcommand reads the same key=value config and works inside its
``run_dir``; stage subcommands pick up the artifacts of earlier stages, so
``train-sqf``, ``query-sd``, ``select``, ``pretrain``, ``finetune``, ``synth``
and ``eval`` in sequence reproduce ``run``. Exit status is 0 on success, 1 on
usage errors and a stage-specific code (see ``pipeline.EXIT_CODES``) when a
stage fails.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import data as dataio
from . import generative as gen
from . import pipeline as pl
from . import semantics as sem
from .accountant import BudgetLedger, PrivacyBudget, PrivacyError, calibrate_sigma1, total_epsilon
from .dpcore import NoiseSource

log = logging.getLogger("privsynth")


def _kv(pairs: dict) -> str:
    return "".join(f"{k}={pl._fmt(v)}\n" for k, v in pairs.items())


def cmd_account(args, cfg: pl.PipelineConfig | None) -> int:
    def pick(flag, key):
        v = getattr(args, flag)
        if v is None and cfg is not None:
            v = getattr(cfg, key)
        return v

    epsilon = pick("epsilon", "epsilon")
    delta = pick("delta", "delta")
    steps = pick("steps", "max_steps")
    sigma2 = pick("sigma2", "sigma2")
    q = args.sample_rate
    if q is None and cfg is not None:
        q = min(1.0, cfg.batch_size / len(pl.load_sources(cfg).sensitive))
    if None in (epsilon, delta, steps, sigma2, q):
        print("account: need --epsilon --delta --steps --sample-rate --sigma2 (or --config)", file=sys.stderr)
        return 1
    try:
        budget = PrivacyBudget(float(epsilon), float(delta))
        sigma1 = calibrate_sigma1(budget, int(steps), float(q), float(sigma2))
    except PrivacyError as exc:
        print(f"account: {exc}", file=sys.stderr)
        return pl.EXIT_CODES["calibrate"]
    eps, order = total_epsilon(sigma1, int(steps), float(q), float(sigma2), float(delta))
    print(f"calibrated sigma1: {sigma1:.6f}")
    print(f"achieved epsilon: {eps:.6f} at order alpha={order:g} (delta={delta:g})")
    print("---")
    print(_kv({
        "sigma1": sigma1, "alpha": order, "epsilon": eps, "delta": float(delta),
        "target_epsilon": float(epsilon), "steps": int(steps), "sample_rate": float(q),
        "sigma2": float(sigma2),
    }), end="")
    return 0


def _run_dir(cfg: pl.PipelineConfig) -> Path:
    out = Path(cfg.run_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _ledger(out: Path, cfg: pl.PipelineConfig) -> BudgetLedger:
    path = out / "ledger.json"
    if path.exists():
        ledger = BudgetLedger.from_json(path.read_text())
        ledger.target = cfg.budget
        return ledger
    return pl.new_ledger(cfg)


def _noisy_sd(out: Path, cfg: pl.PipelineConfig):
    if cfg.conditional:
        files = sorted(out.glob("sd_*.csv"), key=lambda p: int(p.stem.split("_")[1]))
        if not files:
            raise FileNotFoundError("no sd_<category>.csv tables; run query-sd first")
        return {int(p.stem.split("_")[1]): sem.read_sd_table(p, cfg.k1_)[0] for p in files}
    return sem.read_sd_table(out / "sd.csv", cfg.k1_)[0]


def stage_command(name: str, cfg: pl.PipelineConfig) -> None:
    out = _run_dir(cfg)
    root = NoiseSource(cfg.seed)
    src = pl.load_sources(cfg)
    if name == "train-sqf":
        Q = pl.stage_train_sqf(cfg, src.public, src.vocab)
        sem.save_sqf(out / "sqf.ckpt", Q)
        print(f"trained semantic query function: final loss {Q.loss_history[-1]:.6f}")
    elif name == "query-sd":
        Q = sem.load_sqf(out / "sqf.ckpt")
        ledger = _ledger(out, cfg)
        if ledger.count("gaussian_query"):
            raise RuntimeError("the semantic distribution has already been released for this run")
        noisy = pl.stage_query(cfg, Q, src.sensitive, ledger, root.spawn(1))
        if isinstance(noisy, dict):
            for c, sd in noisy.items():
                sem.write_sd_table(out / f"sd_{c}.csv", sd, src.vocab)
        else:
            sem.write_sd_table(out / "sd.csv", noisy, src.vocab)
        (out / "ledger.json").write_text(ledger.to_json())
        print(f"released semantic distribution; ledger epsilon {ledger.epsilon():.6f}")
    elif name == "select":
        desc, selected = pl.stage_select(cfg, _noisy_sd(out, cfg), src.public)
        dataio.save(out / "selected.bin", selected)
        names = " ".join(src.vocab.names[i] for i in sorted(desc.selected))
        (out / "description.txt").write_text(names + "\n")
        print(f"selected {len(selected)}/{len(src.public)} public rows: {names}")
    elif name == "pretrain":
        selected = dataio.load(out / "selected.bin")
        n_classes = int(src.sensitive.n_classes or 0) if cfg.conditional else 0
        model = pl.build_model(cfg, selected if len(selected) > 1 else src.public, n_classes)
        model = pl.stage_pretrain(cfg, model, selected)
        gen.save_model(out / "pretrained.ckpt", model)
        print(f"pretrained {cfg.model} model on {len(selected)} rows")
    elif name == "finetune":
        model = gen.load_model(out / "pretrained.ckpt")
        ledger = _ledger(out, cfg)
        sigma1 = pl.stage_calibrate(cfg, len(src.sensitive))
        ft = pl.finetune_config(cfg, len(src.sensitive), sigma1)
        model = gen.finetune_dp(model, src.sensitive, ft, root.spawn(2), ledger)
        gen.save_model(out / "model.ckpt", model)
        (out / "ledger.json").write_text(ledger.to_json())
        print(f"fine-tuned with sigma1={sigma1:.6f}; ledger epsilon {ledger.epsilon():.6f}")
    elif name == "synth":
        model = gen.load_model(out / "model.ckpt")
        synthetic = gen.synthesize(model, cfg.n_synth, None, cfg.sampler_steps, root.spawn(3))
        dataio.save(out / "synthetic.bin", synthetic)
        print(f"wrote {len(synthetic)} synthetic rows")
    elif name == "eval":
        synthetic = dataio.load(out / "synthetic.bin")
        ledger = _ledger(out, cfg)
        reference = src.sensitive_test if src.sensitive_test is not None else src.sensitive
        values = pl.evaluate(cfg, synthetic, reference, src.sensitive_test)
        if (out / "selected.bin").exists():
            selected = dataio.load(out / "selected.bin")
            values["n_selected"] = len(selected)
            values["selection_ratio"] = len(selected) / max(len(src.public), 1)
            values.update(pl.selection_sds(_noisy_sd(out, cfg), selected, src.public, src.vocab, dataio.load_embeddings()))
        text, csv_text = pl.report(ledger, values)
        (out / "report.txt").write_text(text)
        (out / "report.csv").write_text(csv_text)
        print(text, end="")
    pl.write_manifest(out, cfg)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="privsynth", description="DP synthetic data with semantic-aware pretraining")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--steps", type=int, help="override max fine-tuning steps (T_m)")
        sp.add_argument("--run-dir", help="override the run directory")
        sp.add_argument("--dry-run", action="store_true", help="print the plan without training")
        sp.add_argument("-v", "--verbose", action="store_true")

    acc = sub.add_parser("account", help="calibrate sigma1 for a privacy budget")
    common(acc)
    acc.add_argument("--epsilon", type=float)
    acc.add_argument("--delta", type=float)
    acc.add_argument("--sample-rate", type=float)
    acc.add_argument("--sigma2", type=float)
    for name in ("train-sqf", "query-sd", "select", "pretrain", "finetune", "synth", "eval", "run"):
        common(sub.add_parser(name))
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    cfg = None
    overrides = {"seed": args.seed, "max_steps": args.steps, "run_dir": args.run_dir}
    if args.command == "account":
        overrides.pop("max_steps")
    try:
        if args.config:
            cfg = pl.load_config(args.config, **overrides)
        elif args.command != "account":
            cfg = pl.PipelineConfig(**{k: v for k, v in overrides.items() if v is not None})
    except (OSError, ValueError) as exc:
        print(f"privsynth: bad config: {exc}", file=sys.stderr)
        return pl.EXIT_CODES["config"]

    if args.command == "account":
        return cmd_account(args, cfg)
    try:
        if args.dry_run:
            plan = pl.plan(cfg)
            print("dry run: no training, no budget spent")
            print(_kv(plan), end="")
            return 0
        if args.command == "run":
            result = pl.run_pipeline(cfg)
            print(result.report_text, end="")
            return 0
        try:
            stage_command(args.command, cfg)
        except pl.StageError:
            raise
        except Exception as exc:
            raise pl.StageError(args.command, exc) from exc
    except pl.StageError as exc:
        print(f"privsynth: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
