"""Command-line surface over the library operations.

Subcommands: synth, mfcc, train, extract, backend-train, score, eval,
gradcheck.  Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import backend as bk
from . import formats as fm
from . import metrics as mt
from . import models as md
from . import training as tr
from .corpus import SyntheticCorpusSpec, generate_synthetic_corpus
from .frontend import FrontendConfig, read_wav, voiced_features


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Argument parser that exits with status 1 on usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _cmd_synth(args) -> int:
    spec = SyntheticCorpusSpec(
        n_speakers=args.n_speakers, utts_per_speaker=args.utts_per_speaker,
        utterance_s=args.seconds, feature_dim=args.dim,
        frame_shift_ms=args.frame_shift_ms, separation=args.separation,
        mixture_components=args.components, mixture_spread=args.mixture_spread,
        channel_scale=args.channel_scale, noise_scale=args.noise_scale,
        seed=args.seed, speaker_prefix=args.prefix)
    features, utt2spk = generate_synthetic_corpus(spec)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fm.write_features(out / "feats.bin", features, spec.frame_shift_ms)
    fm.write_utt2spk(out / "utt2spk.txt", utt2spk)
    print(f"wrote {len(features)} utterances from {spec.n_speakers} speakers to {out}")
    return 0


def _cmd_mfcc(args) -> int:
    cfg = FrontendConfig(frame_length_ms=args.frame_length_ms,
                         frame_shift_ms=args.frame_shift_ms,
                         preemphasis=args.preemphasis,
                         n_mel_filters=args.mel_filters,
                         n_cepstra=args.cepstra,
                         cmn_window_s=args.cmn_window_s,
                         vad_energy_offset=args.vad_offset)
    paths = [Path(p) for p in args.wav]
    if args.wav_dir:
        paths += sorted(Path(args.wav_dir).glob("*.wav"))
    if not paths:
        raise CliError("no input WAV files")
    features = {}
    for path in paths:
        feats = voiced_features(read_wav(path), cfg,
                                apply_vad=not args.no_vad,
                                apply_cmn=not args.no_cmn)
        features[path.stem] = feats.values
    fm.write_features(args.out, features, cfg.frame_shift_ms)
    print(f"wrote features for {len(features)} utterances to {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = fm.load_config(args.config) if args.config else fm.ExperimentConfig()
    features, meta = fm.read_features(args.features)
    utt2spk = fm.read_utt2spk(args.utt2spk)
    resume = None
    if args.resume:
        model, ck_meta = fm.load_checkpoint(args.resume)
        if ck_meta["config_hash"] != cfg.config_hash():
            raise CliError("checkpoint was produced by a different configuration")
        resume = {"model": model, "meta": ck_meta}
    result = tr.train_extractor(features, utt2spk, cfg, log=print, resume=resume,
                                frame_shift_ms=meta["frame_shift_ms"])
    tr.save_train_checkpoint(args.out, result, cfg)
    if result.best_state is not None and args.best_out:
        best_model = tr.build_model(cfg, len(set(utt2spk.values())))
        best_model.params.load_state(result.best_state)
        fm.save_checkpoint(args.best_out, best_model, step=result.final_step,
                           epoch=cfg.epochs, config_hash=cfg.config_hash(),
                           rng_state=result.rng_state,
                           extra={"best_val_eer": result.best_val_eer})
    print(f"wrote checkpoint to {args.out}")
    return 0


def _cmd_extract(args) -> int:
    model, _ = fm.load_checkpoint(args.checkpoint)
    features, _ = fm.read_features(args.features)
    embeddings, skipped = tr.extract_embeddings(
        model, features, threads=args.threads,
        log=lambda msg: print(msg, file=sys.stderr))
    fm.write_embeddings(args.out, embeddings)
    if args.manifest:
        with open(args.manifest, "w", encoding="utf-8") as fh:
            for utt in skipped:
                fh.write(f"{utt} skipped\n")
    print(f"wrote {len(embeddings)} embeddings to {args.out} "
          f"({len(skipped)} skipped)")
    return 0


def _load_labeled_embeddings(emb_path, utt2spk_path):
    embeddings = fm.read_embeddings(emb_path)
    utt2spk = fm.read_utt2spk(utt2spk_path)
    utts = sorted(u for u in embeddings if u in utt2spk)
    if not utts:
        raise CliError("no labeled embeddings found")
    matrix = np.stack([embeddings[u] for u in utts])
    labels = np.array([utt2spk[u] for u in utts])
    return utts, matrix, labels


def _cmd_backend_train(args) -> int:
    utts, matrix, labels = _load_labeled_embeddings(args.embeddings, args.utt2spk)
    if args.kind == "csml":
        opts = bk.CsmlTrainConfig(epochs=args.epochs, n_hard=args.n_hard,
                                  max_triplets=args.max_triplets, seed=args.seed)
        transform = bk.train_csml(matrix, labels, opts)
        fm.write_archive(args.out, {"transform": transform.matrix},
                         {"kind": "csml"}, dtype="f8")
        print(f"wrote cosine transform ({transform.dim}x{transform.dim}) to {args.out}")
    else:
        model = bk.plda_fit(matrix, labels, n_iter=args.em_iters,
                            lda_dim=args.lda_dim,
                            length_norm=not args.no_length_norm)
        arrays = {"mean": model.mean, "between": model.between, "within": model.within}
        meta = {"kind": "plda", "length_norm": model.length_norm,
                "lda_dim": model.lda.out_dim if model.lda else None}
        if model.lda is not None:
            arrays["lda"] = model.lda.matrix
            arrays["lda_eigenvalues"] = model.lda.eigenvalues
        fm.write_archive(args.out, arrays, meta, dtype="f8")
        print(f"wrote PLDA model to {args.out}")
    return 0


def _cmd_score(args) -> int:
    embeddings = fm.read_embeddings(args.embeddings)
    with open(args.trials, encoding="utf-8") as fh:
        trials = mt.parse_trials(fh.read())
    if args.center:
        arrays, _ = fm.read_archive(args.center)
        mean = arrays["mean"]
        embeddings = {u: bk.center(e, mean) for u, e in embeddings.items()}

    if args.backend == "cosine":
        scorer = lambda e1, e2: bk.cosine_score(e1, e2)
    elif args.backend == "csml":
        if not args.model:
            raise CliError("--model is required for the csml backend")
        arrays, meta = fm.read_archive(args.model)
        if meta is None or meta.get("kind") != "csml":
            raise CliError(f"{args.model}: not a cosine transform file")
        transform = bk.CsmlTransform(arrays["transform"])
        scorer = lambda e1, e2: bk.csml_score(e1, e2, transform)
    else:
        if not args.model:
            raise CliError("--model is required for the plda backend")
        arrays, meta = fm.read_archive(args.model)
        if meta is None or meta.get("kind") != "plda":
            raise CliError(f"{args.model}: not a PLDA model file")
        lda = None
        if "lda" in arrays:
            lda = bk.LdaProjection(arrays["lda"], arrays["lda_eigenvalues"])
        model = bk.PldaModel(arrays["mean"], arrays["between"], arrays["within"],
                             lda=lda, length_norm=meta["length_norm"])
        scorer = lambda e1, e2: bk.plda_score(model, e1, e2)

    scores = []
    for trial in trials:
        if trial.enroll not in embeddings or trial.test not in embeddings:
            raise CliError(f"trial references unknown utterance "
                           f"{trial.enroll!r} or {trial.test!r}")
        scores.append(scorer(embeddings[trial.enroll], embeddings[trial.test]))
    score_set = mt.ScoreSet(trials, np.asarray(scores))
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(mt.write_scores(score_set))
    print(f"wrote {len(scores)} scores to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    with open(args.scores, encoding="utf-8") as fh:
        score_set = mt.parse_scores(fh.read())
    summary = mt.summarize(score_set, p_targets=tuple(args.p_target))
    print(f"{'metric':<18} value")
    print(f"{'EER':<18} {summary['eer'] * 100:.3f}%")
    for p in args.p_target:
        print(f"{'minDCF(p=%g)' % p:<18} {summary[f'min_dcf_p{p:g}']:.4f}")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(summary, fh, sort_keys=True, indent=2)
            fh.write("\n")
    return 0


def _cmd_gradcheck(args) -> int:
    from .gradcheck_suite import run_suite

    failures = run_suite(frames=args.frames, samples=args.samples, seed=args.seed,
                         log=print)
    if failures:
        raise CliError(f"{failures} gradient check(s) exceeded tolerance")
    print("all gradient checks passed")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="spkver", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic labeled corpus")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n-speakers", type=int, default=8)
    p.add_argument("--utts-per-speaker", type=int, default=10)
    p.add_argument("--seconds", type=float, default=6.0)
    p.add_argument("--dim", type=int, default=23)
    p.add_argument("--frame-shift-ms", type=float, default=10.0)
    p.add_argument("--separation", type=float, default=1.0)
    p.add_argument("--components", type=int, default=4)
    p.add_argument("--mixture-spread", type=float, default=0.5)
    p.add_argument("--channel-scale", type=float, default=0.2)
    p.add_argument("--noise-scale", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--prefix", default="spk")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("mfcc", help="extract voiced, normalized MFCC features")
    p.add_argument("--wav", nargs="*", default=[])
    p.add_argument("--wav-dir")
    p.add_argument("--out", required=True)
    p.add_argument("--frame-length-ms", type=float, default=25.0)
    p.add_argument("--frame-shift-ms", type=float, default=10.0)
    p.add_argument("--preemphasis", type=float, default=0.97)
    p.add_argument("--mel-filters", type=int, default=23)
    p.add_argument("--cepstra", type=int, default=23)
    p.add_argument("--cmn-window-s", type=float, default=3.0)
    p.add_argument("--vad-offset", type=float, default=0.0)
    p.add_argument("--no-vad", action="store_true")
    p.add_argument("--no-cmn", action="store_true")
    p.set_defaults(func=_cmd_mfcc)

    p = sub.add_parser("train", help="train an embedding extractor")
    p.add_argument("--config")
    p.add_argument("--features", required=True)
    p.add_argument("--utt2spk", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--best-out")
    p.add_argument("--resume")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("extract", help="extract embeddings with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--manifest")
    p.add_argument("--threads", type=int, default=None,
                   help="defaults to $SPKVER_THREADS or 1")
    p.set_defaults(func=_cmd_extract)

    p = sub.add_parser("backend-train", help="fit a scoring backend")
    p.add_argument("--kind", choices=["csml", "lda-plda"], required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--utt2spk", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--n-hard", type=int, default=1500)
    p.add_argument("--max-triplets", type=int, default=100_000)
    p.add_argument("--em-iters", type=int, default=15)
    p.add_argument("--lda-dim", type=int, default=None)
    p.add_argument("--no-length-norm", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_backend_train)

    p = sub.add_parser("score", help="score a trial list")
    p.add_argument("--backend", choices=["cosine", "csml", "plda"], required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--trials", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--model", help="transform / PLDA model file")
    p.add_argument("--center", help="archive holding a 'mean' vector to subtract")
    p.set_defaults(func=_cmd_score)

    p = sub.add_parser("eval", help="EER and minDCF of a score file")
    p.add_argument("--scores", required=True)
    p.add_argument("--p-target", type=float, nargs="+", default=[0.01, 0.001])
    p.add_argument("--json", help="also write a machine-readable summary")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--frames", type=int, default=50)
    p.add_argument("--samples", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (CliError, OSError, ValueError, RuntimeError) as exc:
        print(f"spkver: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
