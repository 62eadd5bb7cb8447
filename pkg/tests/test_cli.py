"""End-to-end CLI behavior: subcommand plumbing, exit codes, and
equality with the library-level results."""

import numpy as np
import pytest

from spkver import backend as bk
from spkver import formats as fm
from spkver import frontend as fe
from spkver import metrics as mt
from spkver.cli import main


def run(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


@pytest.fixture()
def toy_dir(tmp_path, capsys):
    code, _, err = run(capsys, "synth", "--out-dir", str(tmp_path / "corpus"),
                       "--n-speakers", "3", "--utts-per-speaker", "6",
                       "--seconds", "2.0", "--separation", "2.0", "--seed", "5")
    assert code == 0, err
    return tmp_path


def write_toy_config(path, **overrides):
    cfg = fm.ExperimentConfig(arch="maxpool", width_scale=0.125, loss="softmax",
                              learning_rate=0.05, batch_size=4, epochs=1,
                              steps_per_epoch=3, segment_min_s=0.8,
                              segment_max_s=1.2, val_fraction=0.0, seed=0)
    for key, value in overrides.items():
        setattr(cfg, key, value)
    path.write_text(fm.dump_config(cfg))
    return cfg


def test_exit_codes(capsys, tmp_path):
    code, _, err = run(capsys, "no-such-command")
    assert code == 1 and "error" in err
    code, _, err = run(capsys, "eval", "--scores", str(tmp_path / "missing.txt"))
    assert code == 2 and "spkver:" in err
    code, _, err = run(capsys, "synth", "--unknown-flag", "x")
    assert code == 1


def test_synth_writes_deterministic_corpus(capsys, tmp_path):
    for name in ("a", "b"):
        code, _, _ = run(capsys, "synth", "--out-dir", str(tmp_path / name),
                         "--n-speakers", "2", "--utts-per-speaker", "2",
                         "--seconds", "1.0", "--seed", "3")
        assert code == 0
    assert (tmp_path / "a" / "feats.bin").read_bytes() == \
        (tmp_path / "b" / "feats.bin").read_bytes()
    assert (tmp_path / "a" / "utt2spk.txt").read_text() == \
        (tmp_path / "b" / "utt2spk.txt").read_text()


def test_mfcc_subcommand(capsys, tmp_path):
    rate = 8000
    rng = np.random.default_rng(0)
    for i in range(2):
        tone = 0.3 * np.sin(2 * np.pi * (500 + 200 * i) * np.arange(rate) / rate)
        tone += 0.02 * rng.standard_normal(rate)
        fe.write_wav(tmp_path / f"utt{i}.wav", fe.Waveform(tone, rate))
    out = tmp_path / "feats.bin"
    code, _, err = run(capsys, "mfcc", "--wav-dir", str(tmp_path), "--out", str(out))
    assert code == 0, err
    feats, meta = fm.read_features(out)
    assert set(feats) == {"utt0", "utt1"}
    assert meta["dim"] == 23


def test_train_epochs_zero_emits_loadable_checkpoint(capsys, toy_dir, tmp_path):
    corpus = toy_dir / "corpus"
    cfg_path = tmp_path / "exp.ini"
    write_toy_config(cfg_path, epochs=0)
    ckpt = tmp_path / "init.ckpt"
    code, _, err = run(capsys, "train", "--config", str(cfg_path),
                       "--features", str(corpus / "feats.bin"),
                       "--utt2spk", str(corpus / "utt2spk.txt"),
                       "--out", str(ckpt))
    assert code == 0, err
    emb_path = tmp_path / "emb.bin"
    code, _, err = run(capsys, "extract", "--checkpoint", str(ckpt),
                       "--features", str(corpus / "feats.bin"),
                       "--out", str(emb_path))
    assert code == 0, err
    emb = fm.read_embeddings(emb_path)
    assert len(emb) == 18


def test_full_pipeline_matches_library(capsys, toy_dir, tmp_path):
    corpus = toy_dir / "corpus"
    cfg_path = tmp_path / "exp.ini"
    write_toy_config(cfg_path, epochs=1)
    ckpt = tmp_path / "model.ckpt"
    code, _, err = run(capsys, "train", "--config", str(cfg_path),
                       "--features", str(corpus / "feats.bin"),
                       "--utt2spk", str(corpus / "utt2spk.txt"),
                       "--out", str(ckpt))
    assert code == 0, err

    emb_path = tmp_path / "emb.bin"
    code, _, _ = run(capsys, "extract", "--checkpoint", str(ckpt),
                     "--features", str(corpus / "feats.bin"),
                     "--out", str(emb_path))
    assert code == 0

    utt2spk = fm.read_utt2spk(corpus / "utt2spk.txt")
    utts = sorted(utt2spk)
    trials = []
    for i, a in enumerate(utts):
        for b in utts[i + 1 : i + 4]:
            trials.append(mt.Trial(a, b, utt2spk[a] == utt2spk[b]))
    trials_path = tmp_path / "trials.txt"
    trials_path.write_text(mt.write_trials(trials))

    scores_path = tmp_path / "scores.txt"
    code, _, err = run(capsys, "score", "--backend", "cosine",
                       "--embeddings", str(emb_path),
                       "--trials", str(trials_path),
                       "--out", str(scores_path))
    assert code == 0, err

    emb = fm.read_embeddings(emb_path)
    expected = np.array([bk.cosine_score(emb[t.enroll], emb[t.test]) for t in trials])
    score_set = mt.parse_scores(scores_path.read_text())
    assert np.array_equal(score_set.scores, expected)

    json_path = tmp_path / "metrics.json"
    code, out, _ = run(capsys, "eval", "--scores", str(scores_path),
                       "--json", str(json_path))
    assert code == 0
    assert "EER" in out and "minDCF" in out
    import json
    summary = json.loads(json_path.read_text())
    assert summary["eer"] == pytest.approx(mt.compute_eer(score_set))


def test_eval_perfect_fixture_prints_zero(capsys, tmp_path):
    trials = [mt.Trial("a", "b", True), mt.Trial("a", "c", False),
              mt.Trial("d", "e", True), mt.Trial("d", "f", False)]
    s = mt.ScoreSet(trials, np.array([0.9, 0.1, 0.8, 0.2]))
    path = tmp_path / "scores.txt"
    path.write_text(mt.write_scores(s))
    code, out, _ = run(capsys, "eval", "--scores", str(path))
    assert code == 0
    assert "0.000%" in out


def test_backend_train_and_score_csml_plda(capsys, tmp_path):
    rng = np.random.default_rng(1)
    centers = 3.0 * rng.standard_normal((4, 8))
    emb, utt2spk = {}, {}
    for s in range(4):
        for u in range(6):
            utt = f"s{s}u{u}"
            emb[utt] = centers[s] + 0.5 * rng.standard_normal(8)
            utt2spk[utt] = f"s{s}"
    emb_path = tmp_path / "emb.bin"
    fm.write_embeddings(emb_path, {k: v.astype(np.float32).astype(float)
                                   for k, v in emb.items()})
    fm.write_utt2spk(tmp_path / "utt2spk.txt", utt2spk)

    utts = sorted(emb)
    trials = [mt.Trial(a, b, utt2spk[a] == utt2spk[b])
              for i, a in enumerate(utts) for b in utts[i + 1 :]]
    trials_path = tmp_path / "trials.txt"
    trials_path.write_text(mt.write_trials(trials))

    csml_path = tmp_path / "csml.bin"
    code, _, err = run(capsys, "backend-train", "--kind", "csml",
                       "--embeddings", str(emb_path),
                       "--utt2spk", str(tmp_path / "utt2spk.txt"),
                       "--out", str(csml_path), "--epochs", "2", "--n-hard", "10")
    assert code == 0, err
    code, _, err = run(capsys, "score", "--backend", "csml",
                       "--embeddings", str(emb_path), "--trials", str(trials_path),
                       "--model", str(csml_path),
                       "--out", str(tmp_path / "csml_scores.txt"))
    assert code == 0, err

    plda_path = tmp_path / "plda.bin"
    code, _, err = run(capsys, "backend-train", "--kind", "lda-plda",
                       "--embeddings", str(emb_path),
                       "--utt2spk", str(tmp_path / "utt2spk.txt"),
                       "--out", str(plda_path), "--em-iters", "5", "--lda-dim", "3")
    assert code == 0, err
    code, _, err = run(capsys, "score", "--backend", "plda",
                       "--embeddings", str(emb_path), "--trials", str(trials_path),
                       "--model", str(plda_path),
                       "--out", str(tmp_path / "plda_scores.txt"))
    assert code == 0, err

    for name in ("csml_scores.txt", "plda_scores.txt"):
        code, out, _ = run(capsys, "eval", "--scores", str(tmp_path / name))
        assert code == 0

    # centering changes cosine scores
    mean_path = tmp_path / "mean.bin"
    stacked = np.stack([emb[u] for u in utts])
    fm.write_archive(mean_path, {"mean": stacked.mean(axis=0)}, None, dtype="f8")
    code, _, _ = run(capsys, "score", "--backend", "cosine",
                     "--embeddings", str(emb_path), "--trials", str(trials_path),
                     "--center", str(mean_path),
                     "--out", str(tmp_path / "centered.txt"))
    assert code == 0
    code, _, _ = run(capsys, "score", "--backend", "cosine",
                     "--embeddings", str(emb_path), "--trials", str(trials_path),
                     "--out", str(tmp_path / "plain.txt"))
    assert code == 0
    assert (tmp_path / "centered.txt").read_text() != (tmp_path / "plain.txt").read_text()


def test_gradcheck_subcommand_quick(capsys):
    code, out, err = run(capsys, "gradcheck", "--frames", "46", "--samples", "1")
    assert code == 0, err
    assert "PASS" in out and "FAIL" not in out


def test_score_requires_model_for_csml(capsys, tmp_path):
    emb_path = tmp_path / "emb.bin"
    fm.write_embeddings(emb_path, {"a": np.ones(3), "b": np.ones(3)})
    trials_path = tmp_path / "t.txt"
    trials_path.write_text("a b target\n")
    code, _, err = run(capsys, "score", "--backend", "csml",
                       "--embeddings", str(emb_path), "--trials", str(trials_path),
                       "--out", str(tmp_path / "s.txt"))
    assert code == 2 and "--model" in err
