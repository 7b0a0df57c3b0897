import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from avgen.checkpoint import load_checkpoint
from avgen.cli import EXIT_DIAG, EXIT_IO, EXIT_OK, EXIT_USAGE, main
from avgen.corpus import read_meta
from avgen.experiment import ExperimentConfig, snr_bin
from avgen.signal import Waveform, read_wav, snr_db, write_wav

GOLDEN = Path(__file__).parent / "golden" / "evaluate_schema.json"

TINY = {
    "corpus": {"n_train": 4, "n_test": 4, "max_duration": 2.5, "embedding_layers": 3, "embedding_dim": 5},
    "net": {"channels": [2, 3, 4], "temb_dim": 4, "emb_layers": 3, "emb_dim": 5},
    "train": {"max_tokens": 600, "steps": 3, "dtype": "float64"},
    "sampler": {"steps": 2},
    "seed": 7,
}


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    corpus = root / "corpus"
    assert main(["synth-corpus", str(corpus), "--config", str(cfg)]) == EXIT_OK
    ckpt = root / "model.avgc"
    assert main(["train", str(corpus), str(ckpt), "--config", str(cfg)]) == EXIT_OK
    return {"root": root, "cfg": cfg, "corpus": corpus, "ckpt": ckpt}


def _tree_bytes(d: Path) -> dict:
    return {str(p.relative_to(d)): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def test_synth_corpus_contract(run):
    corpus = run["corpus"]
    meta = read_meta(corpus)
    assert len(meta.items) == 8
    assert meta.config_hash == ExperimentConfig.from_json(TINY).hash
    for it in meta.items:
        assert -6.0 <= it.snr_target_db <= 12.0
        for sub, ext in (("clean", "wav"), ("noisy", "wav"), ("labels", "json"), ("emb", "ave")):
            assert (corpus / sub / f"{it.id}.{ext}").is_file()
        c = read_wav(corpus / "clean" / f"{it.id}.wav").samples
        y = read_wav(corpus / "noisy" / f"{it.id}.wav").samples
        assert abs(snr_db(c, y - c) - it.snr_db) < 1e-6
        assert abs(it.snr_db - it.snr_target_db) < 1e-2


def test_synth_corpus_rerun_is_byte_identical(run, tmp_path):
    again = tmp_path / "again"
    assert main(["synth-corpus", str(again), "--config", str(run["cfg"])]) == EXIT_OK
    assert _tree_bytes(again) == _tree_bytes(run["corpus"])


def test_synth_corpus_refuses_non_empty_dir(run):
    assert main(["synth-corpus", str(run["corpus"]), "--config", str(run["cfg"])]) == EXIT_IO


def test_train_outputs(run):
    params, state, cfg, meta = load_checkpoint(run["ckpt"])
    assert state.step == 3 and meta["step"] == 3
    assert meta["config_hash"] == cfg.hash
    assert np.isfinite(meta["val_loss"])
    log = [json.loads(line) for line in Path(str(run["ckpt"]) + ".log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in log] == [1, 2, 3]
    assert set(log[0]) == {"step", "epoch", "loss", "lr", "tokens", "wall_ms"}


def test_train_rerun_matches_except_timing(run, tmp_path):
    ckpt = tmp_path / "m.avgc"
    assert main(["train", str(run["corpus"]), str(ckpt), "--config", str(run["cfg"])]) == EXIT_OK
    assert ckpt.read_bytes() == run["ckpt"].read_bytes()

    def strip(p):
        return [{k: v for k, v in json.loads(line).items() if k != "wall_ms"} for line in Path(p).read_text().splitlines()]

    assert strip(str(ckpt) + ".log.jsonl") == strip(str(run["ckpt"]) + ".log.jsonl")


def test_checkpoint_reload_is_bit_exact(run, tmp_path):
    from avgen.checkpoint import save_checkpoint

    params, state, cfg, meta = load_checkpoint(run["ckpt"])
    copy = tmp_path / "copy.avgc"
    save_checkpoint(copy, params, state, cfg.to_json(), meta)
    assert copy.read_bytes() == run["ckpt"].read_bytes()


def test_enhance_single_file_deterministic(run, tmp_path):
    corpus = run["corpus"]
    args = [str(run["ckpt"]), str(corpus / "noisy" / "test_0000.wav"), str(corpus / "emb" / "test_0000.ave")]
    a, b = tmp_path / "a.wav", tmp_path / "b.wav"
    assert main(["enhance", *args, str(a), "--seed", "3"]) == EXIT_OK
    assert main(["enhance", *args, str(b), "--seed", "3"]) == EXIT_OK
    assert a.read_bytes() == b.read_bytes()
    assert len(read_wav(a)) == len(read_wav(corpus / "noisy" / "test_0000.wav"))
    report = json.loads(Path(str(a) + ".json").read_text())
    assert report["nfe"] == 2 * (1 + 1) and report["seed"] == 3
    assert main(["enhance", *args, str(a)]) == EXIT_IO  # exists, no --force


def test_enhance_corpus_and_evaluate(run, tmp_path):
    out = tmp_path / "est"
    assert main(["enhance", str(run["ckpt"]), "--corpus", str(run["corpus"]), "--out-dir", str(out), "--steps", "1"]) == EXIT_OK
    manifest = json.loads((out / "enhance.json").read_text())
    assert manifest["files"] == [f"test_{i:04d}" for i in range(4)]
    assert manifest["nfe"] == 2
    parallel = tmp_path / "est2"
    argv = ["enhance", str(run["ckpt"]), "--corpus", str(run["corpus"]), "--out-dir", str(parallel), "--steps", "1", "--workers", "2"]
    assert main(argv) == EXIT_OK
    assert _tree_bytes(out) == _tree_bytes(parallel)
    res = tmp_path / "eval.json"
    # without --config the hash is taken from the enhancement manifest
    assert main(["evaluate", str(run["corpus"]), str(out), str(res)]) == EXIT_OK
    data = json.loads(res.read_text())
    assert data["config_hash"] == manifest["config_hash"]
    assert len(data["per_file"]) == 4


def test_enhance_usage_errors(run, tmp_path):
    assert main(["enhance", str(run["ckpt"])]) == EXIT_USAGE
    other = tmp_path / "other.json"
    other.write_text(json.dumps({**TINY, "net": {**TINY["net"], "channels": [2, 3, 6]}}))
    corpus = run["corpus"]
    argv = ["enhance", str(run["ckpt"]), str(corpus / "noisy" / "test_0000.wav"), str(corpus / "emb" / "test_0000.ave")]
    assert main([*argv, str(tmp_path / "x.wav"), "--config", str(other)]) == EXIT_USAGE
    assert main(["enhance", str(tmp_path / "missing.avgc"), *argv[2:], str(tmp_path / "y.wav")]) == EXIT_IO


_JSON_TYPES = {"int": int, "float": float, "str": str, "null": type(None)}


def _conforms(obj, schema, path="$"):
    """Yields mismatches between a decoded JSON value and a golden key/type skeleton."""
    if isinstance(schema, dict):
        if not isinstance(obj, dict) or set(obj) != set(schema):
            yield f"{path}: keys {sorted(obj) if isinstance(obj, dict) else obj!r} != {sorted(schema)}"
            return
        for k in schema:
            yield from _conforms(obj[k], schema[k], f"{path}.{k}")
    elif isinstance(schema, list):
        if not isinstance(obj, list) or not obj:
            yield f"{path}: expected a non-empty list"
            return
        for i, row in enumerate(obj):
            yield from _conforms(row, schema[0], f"{path}[{i}]")
    else:
        allowed = tuple(_JSON_TYPES[t] for t in schema.split("|"))
        if type(obj) not in allowed:
            yield f"{path}: {type(obj).__name__} not in {schema}"


def test_evaluate_identity_and_golden_schema(run, tmp_path):
    res = tmp_path / "eval.json"
    corpus = run["corpus"]
    assert main(["evaluate", str(corpus), str(corpus / "clean"), str(res), "--config", str(run["cfg"])]) == EXIT_OK
    data = json.loads(res.read_text())
    for row in data["per_file"]:
        assert row["wer"] == 0 and row["si_sdr"] == 100.0 and row["lsd"] == 0.0
    assert data["mean"] == {"si_sdr": 100.0, "lsd": 0.0, "wer": 0.0}
    assert data["by_snr_bin"].keys() == {"[-6,-2)", "[-2,2)", "[2,6)", "[6,12]"}
    assert sum(b["count"] for b in data["by_snr_bin"].values()) == 4
    golden = json.loads(GOLDEN.read_text())
    assert data["schema_version"] == golden["schema_version"]
    assert list(_conforms(data, golden["fields"])) == []


def test_evaluate_noisy_matches_mixing_snr(tmp_path):
    corpus = tmp_path / "default"
    assert main(["synth-corpus", str(corpus)]) == EXIT_OK
    meta = read_meta(corpus)
    for split in ("train", "test"):
        res = tmp_path / f"{split}.json"
        assert main(["evaluate", str(corpus), str(corpus / "noisy"), str(res), "--split", split]) == EXIT_OK
        data = json.loads(res.read_text())
        mixing = np.mean([it.snr_db for it in meta.split(split)])
        assert abs(data["mean"]["si_sdr"] - mixing) < 1.0


def test_snr_bins():
    assert [snr_bin(v) for v in (-6, -2.01, -2, 1.99, 2, 6, 12, 12.5, -7)] == [
        "[-6,-2)", "[-6,-2)", "[-2,2)", "[-2,2)", "[2,6)", "[6,12]", "[6,12]", "[6,12]", "[-6,-2)"
    ]


def test_diagnose_exit_codes(tmp_path, monkeypatch):
    from avgen import diagnostics

    assert main(["diagnose", "kernel", "--out", str(tmp_path / "k.json")]) == EXIT_OK
    report = json.loads((tmp_path / "k.json").read_text())
    assert report["passed"] and report["kind"] == "kernel"
    assert main(["diagnose", "gradcheck"]) == EXIT_OK
    assert main(["diagnose", "nonsense"]) == EXIT_USAGE
    monkeypatch.setattr(diagnostics, "run", lambda kind, seed: {"kind": kind, "passed": False, "checks": []})
    assert main(["diagnose", "kernel"]) == EXIT_DIAG


def test_usage_errors_exit_one(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["no-such-command"])
    assert exc.value.code == EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        main(["synth-corpus", str(tmp_path / "c"), "--seed", "-1"])
    assert exc.value.code == EXIT_USAGE
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"nonsense": 1}}))
    assert main(["synth-corpus", str(tmp_path / "c"), "--config", str(bad)]) == EXIT_USAGE


def test_console_script_runs():
    proc = subprocess.run([sys.executable, "-m", "avgen.cli", "diagnose", "unknown"], capture_output=True, text=True)
    assert proc.returncode == EXIT_USAGE
    assert "unknown diagnostic kind" in proc.stderr


def _pgm(path):
    raw = path.read_bytes()
    header, _, rest = raw.partition(b"\n255\n")
    magic, dims = header.split(b"\n")
    w, h = (int(v) for v in dims.split())
    assert magic == b"P5"
    return np.frombuffer(rest, dtype=np.uint8).reshape(h, w)


def test_plot_spec_silence_and_size(tmp_path):
    wav = tmp_path / "s.wav"
    write_wav(wav, Waveform(np.zeros(16000)))
    img_path = tmp_path / "s.pgm"
    assert main(["plot-spec", str(wav), str(img_path)]) == EXIT_OK
    img = _pgm(img_path)
    assert img.shape == (256, 101)
    assert np.all(img == 0)


def test_plot_spec_sinusoid_row(tmp_path):
    b = 64
    t = np.arange(16000) / 16000
    wav = tmp_path / "tone.wav"
    write_wav(wav, Waveform(0.5 * np.sin(2 * np.pi * b * 16000 / 510 * t)))
    img_path = tmp_path / "tone.pgm"
    assert main(["plot-spec", str(wav), str(img_path)]) == EXIT_OK
    img = _pgm(img_path)
    # the highest bin is the top row, so bin b sits at row 255 - b
    assert np.all(np.argmax(img[:, 3:-3], axis=0) == 255 - b)
    # a half-scale tone peaks at -6 dB
    assert abs(int(img[255 - b, 50]) - round(54 * 255 / 60)) <= 1



def test_config_sections_layer_over_desk_defaults():
    from avgen.experiment import DESK_TRAIN

    base = ExperimentConfig()
    assert ExperimentConfig.from_json({}).hash == base.hash
    assert ExperimentConfig.from_json(base.to_json()).hash == base.hash
    partial = ExperimentConfig.from_json({"train": {"steps": 5}})
    assert partial.train.steps == 5
    assert partial.train.learning_rate == DESK_TRAIN["learning_rate"]
    assert partial.train.max_tokens == DESK_TRAIN["max_tokens"]
    assert partial.hash != base.hash
    assert ExperimentConfig.from_json({"train": {"workers": 3}}).hash == base.hash
