"""Command-line entry point: ``hmmtopo <subcommand> ...``.

Exit status: 0 on success, 2 for invalid input (bad files, configs or
models), 1 when a computation fails.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, dump_config, from_mapping, load_config, read_key_values
from .core import HmmError, UsageError, validate_model
from .corpus import (
    FeatureFormatError,
    ManifestError,
    SyntheticSpec,
    load_manifest,
    load_utterances,
    sample_corpus,
    write_corpus,
)
from .decoding import MODES, build_network, decode_corpus, write_decodes
from .diagnostics import imbalance_coefficients
from .modelio import ModelFormatError, load_models, save_models
from .scoring import align, report_csv, report_text, wer
from .topology import (
    FLATTEN_MODES,
    FeedbackMappingError,
    SweepConfig,
    evaluate,
    flatten_model,
    provenance_json,
    provenance_text,
    run_pipeline,
    sweep_csv,
    sweep_threshold,
)
from .training import TrainingConfig, train_baseline, write_trace

log = logging.getLogger("hmmtopo")

INPUT_ERRORS = (UsageError, ConfigError, ManifestError, FeatureFormatError, ModelFormatError,
                FeedbackMappingError, FileNotFoundError, NotADirectoryError)


class InputError(HmmError):
    pass


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputError(f"cannot create output directory {out}: {exc}") from None
    return out


def _summary(out: Path, args, **fields) -> None:
    data = {"command": args.command, "seed": args.seed, **fields}
    (out / "summary.json").write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _utterances(path):
    manifest = load_manifest(path)
    if not manifest.entries:
        raise InputError(f"manifest {path} lists no utterances")
    return load_utterances(manifest)


def _models(path):
    models = load_models(path)
    for m in models.values():
        bad = validate_model(m)
        if bad:
            raise InputError(f"model {m.label} is invalid: " + "; ".join(map(str, bad)))
    return models


def _training_config(path) -> TrainingConfig:
    return load_config(TrainingConfig, path) if path else TrainingConfig()


def _sweep_config(path) -> SweepConfig:
    return load_config(SweepConfig, path) if path else SweepConfig()


def _gaussians(models) -> dict:
    return {w: m.n_gaussians for w, m in sorted(models.items())}


def cmd_gen_synth(args) -> int:
    values = read_key_values(args.spec)
    if args.seed is not None:
        values["seed"] = str(args.seed)
    spec = from_mapping(SyntheticSpec, values)
    args.seed = spec.seed
    out = _out_dir(args.out)
    corpus = sample_corpus(spec, "train")
    write_corpus(corpus, out)
    written = {"train": len(corpus.utterances)}
    if args.test_utterances:
        test = sample_corpus(dataclasses.replace(spec, n_utterances=args.test_utterances), "test")
        write_corpus(test, out)
        written["test"] = len(test.utterances)
    (out / "spec.txt").write_text(dump_config(spec), encoding="utf-8")
    _summary(out, args, utterances=written, vocabulary=list(corpus.manifest.vocabulary))
    print(f"wrote {written} utterances, vocabulary of {spec.vocab_size}, to {out}")
    return 0


def cmd_train_baseline(args) -> int:
    utts = _utterances(args.manifest)
    cfg = _training_config(args.config)
    out = _out_dir(args.out)
    res = train_baseline(utts, cfg, jobs=args.jobs)
    save_models(res.models, out / "models")
    write_trace(res.trace, out / "trace.csv")
    _summary(out, args, iterations=len(res.trace), final_log_likelihood=res.trace[-1].log_likelihood,
             skipped=res.skipped, gaussians=_gaussians(res.models))
    print(f"trained {len(res.models)} models in {len(res.trace)} iterations")
    return 0


def cmd_flatten(args) -> int:
    models = _models(args.models)
    out = _out_dir(args.out)
    flat = {w: flatten_model(m, args.mode) for w, m in models.items()}
    save_models(flat, out / "models")
    _summary(out, args, mode=args.mode, states={w: m.n_states for w, m in flat.items()},
             gaussians=_gaussians(flat))
    print(f"flattened {len(flat)} models ({args.mode})")
    return 0


def cmd_sweep_prune(args) -> int:
    models = _models(args.models)
    utts = _utterances(args.manifest)
    cfg = _sweep_config(args.config)
    out = _out_dir(args.out)
    res = sweep_threshold(models, utts, cfg, _training_config(args.train_config), jobs=args.jobs)
    save_models(res.kept.models, out / "models")
    (out / "sweep.csv").write_text(sweep_csv([res]), encoding="utf-8")
    _summary(out, args, kept_epsilon=res.kept.epsilon, kept_accuracy=res.kept.accuracy,
             tie_note=res.tie_note, edges_kept=res.kept.edges_kept)
    print(f"kept epsilon {res.kept.epsilon:g} with training accuracy {res.kept.accuracy:.4f}")
    return 0


def cmd_pipeline(args) -> int:
    utts = _utterances(args.manifest)
    tcfg = _training_config(args.train_config)
    scfg = _sweep_config(args.sweep_config)
    test = _utterances(args.test_manifest) if args.test_manifest else None
    out = _out_dir(args.out)
    res = run_pipeline(utts, tcfg, scfg, jobs=args.jobs)
    save_models(res.baseline.models, out / "baseline")
    save_models(res.final, out / "models")
    write_trace(res.baseline.trace, out / "baseline_trace.csv")
    write_trace(res.flat_trained.trace, out / "flat_trace.csv")
    (out / "sweep.csv").write_text(sweep_csv(res.sweeps), encoding="utf-8")
    prov = dict(res.provenance)
    if test is not None:
        base = evaluate(res.baseline.models, test, scfg.decode_mode, scfg.insertion_penalty, args.jobs)
        final = evaluate(res.final, test, scfg.decode_mode, scfg.insertion_penalty, args.jobs)
        prov["test"] = {"baseline_wer": wer(base), "pipeline_wer": wer(final)}
    (out / "provenance.json").write_text(provenance_json(prov), encoding="utf-8")
    report = provenance_text(prov)
    if test is not None:
        report += f"test WER: baseline {prov['test']['baseline_wer']:.6f}, pipeline {prov['test']['pipeline_wer']:.6f}\n"
    (out / "report.txt").write_text(report, encoding="utf-8")
    (out / "train_config.txt").write_text(dump_config(tcfg), encoding="utf-8")
    (out / "sweep_config.txt").write_text(dump_config(scfg), encoding="utf-8")
    _summary(out, args, kept=prov["kept"], budget_matched=prov["budget_matched"],
             gaussian_budget=prov["gaussian_budget"], test=prov.get("test"))
    for w, b in prov["gaussian_budget"].items():
        print(f"gaussian budget {w}: baseline {b['baseline']} flattened {b['flattened']} final {b['final']}")
    print(f"budget matched: {'yes' if prov['budget_matched'] else 'NO'}")
    print(f"kept epsilon {prov['kept']['epsilon']:g}, training accuracy {prov['kept']['train_accuracy']:.4f}")
    if not prov["budget_matched"]:
        log.error("Gaussian budget of the pipeline does not match the baseline")
        return 1
    return 0


def cmd_decode(args) -> int:
    models = _models(args.models)
    utts = _utterances(args.manifest)
    out = _out_dir(args.out)
    net = build_network(models, args.mode, args.penalty)
    results = decode_corpus(net, utts, args.jobs)
    write_decodes(out / "decode.tsv", [u.uid for u in utts], results, net, dump_path=args.dump_path)
    failed = sum(r.failed for r in results)
    _summary(out, args, utterances=len(utts), failed=failed, mode=args.mode, insertion_penalty=args.penalty)
    print(f"decoded {len(utts)} utterances ({failed} failed)")
    return 0


def _read_transcripts(path) -> dict[str, tuple[str, ...]]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from None
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) < 2:
            raise InputError(f"{path}:{lineno}: expected '<id>\\t<labels>'")
        if fields[0] in out:
            raise InputError(f"{path}:{lineno}: duplicate id {fields[0]}")
        out[fields[0]] = tuple(fields[1].split())
    return out


def cmd_score(args) -> int:
    ref = _read_transcripts(args.ref)
    hyp = _read_transcripts(args.hyp)
    extra = sorted(set(hyp) - set(ref))
    if extra:
        raise InputError(f"hypotheses for ids missing from the reference: {extra[:5]}")
    out = _out_dir(args.out)
    counts = None
    for uid, r in ref.items():
        c = align(r, hyp.get(uid, ()))
        counts = c if counts is None else counts + c
    if counts is None or counts.ref_length == 0:
        raise InputError("reference is empty")
    (out / "score.txt").write_text(report_text(counts), encoding="utf-8")
    (out / "score.csv").write_text(report_csv(counts), encoding="utf-8")
    _summary(out, args, N=counts.ref_length, S=counts.substitutions, D=counts.deletions, I=counts.insertions,
             wer=wer(counts), accuracy=1.0 - wer(counts), missing_hypotheses=len(set(ref) - set(hyp)))
    print(f"WER {wer(counts):.6f}")
    return 0


def cmd_diagnose(args) -> int:
    models = _models(args.models)
    utts = _utterances(args.manifest)
    out = _out_dir(args.out)
    rep = imbalance_coefficients(models, utts)
    (out / "imbalance.txt").write_text(rep.text(), encoding="utf-8")
    (out / "imbalance_samples.csv").write_text(rep.samples_csv(), encoding="utf-8")
    _summary(out, args, samples=rep.n_samples, var_ln_alpha=rep.var_ln_alpha, var_ln_beta=rep.var_ln_beta,
             std_ratio=rep.std_ratio, infeasible_steps=rep.infeasible_steps, skipped=rep.skipped_utterances)
    print(rep.text(), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hmmtopo", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=None, help="global seed (recorded in every summary)")
    p.add_argument("--jobs", type=int, default=1, help="worker threads for utterance-parallel stages")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-synth", help="generate a synthetic corpus")
    s.add_argument("spec", help="key=value synthetic corpus spec")
    s.add_argument("--out", required=True)
    s.add_argument("--test-utterances", type=int, default=0, help="also write a test split of this size")
    s.set_defaults(func=cmd_gen_synth)

    s = sub.add_parser("train-baseline", help="flat start + Baum-Welch with mixture splitting")
    s.add_argument("--manifest", required=True)
    s.add_argument("--config", help="key=value training config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_baseline)

    s = sub.add_parser("flatten", help="flatten GMM states into single-Gaussian states")
    s.add_argument("--models", required=True)
    s.add_argument("--mode", choices=FLATTEN_MODES, default="equiprobable")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_flatten)

    s = sub.add_parser("sweep-prune", help="prune over an epsilon grid, keep the best on training data")
    s.add_argument("--models", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--config", help="key=value sweep config")
    s.add_argument("--train-config", help="training config used when retrain_after_prune is set")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep_prune)

    s = sub.add_parser("pipeline", help="full flatten-then-prune pipeline with emission feedback")
    s.add_argument("--manifest", required=True)
    s.add_argument("--train-config")
    s.add_argument("--sweep-config")
    s.add_argument("--test-manifest", help="also report test WER of baseline and pipeline models")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pipeline)

    s = sub.add_parser("decode", help="token-passing decode of a manifest")
    s.add_argument("--models", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--mode", choices=MODES, default="loop")
    s.add_argument("--penalty", type=float, default=0.0, help="word insertion log-penalty")
    s.add_argument("--dump-path", action="store_true", help="also write per-frame state paths")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_decode)

    s = sub.add_parser("score", help="WER of hypotheses against references")
    s.add_argument("--ref", required=True, help="manifest or '<id>\\t<labels>' file")
    s.add_argument("--hyp", required=True, help="decode.tsv or '<id>\\t<labels>' file")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("diagnose", help="transition/emission imbalance report")
    s.add_argument("--models", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_diagnose)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    if args.jobs < 1:
        parser.error("--jobs must be >= 1")
    if args.seed is None and args.command != "gen-synth":
        args.seed = 0
    try:
        return args.func(args)
    except (InputError, *INPUT_ERRORS) as exc:
        print(f"hmmtopo {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except HmmError as exc:
        print(f"hmmtopo {args.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
