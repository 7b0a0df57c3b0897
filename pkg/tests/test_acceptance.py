"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 7 and 8 share one end-to-end run at the default configuration
(synthetic corpus, two training runs, two enhancement passes, evaluation),
which takes most of the suite's wall time.
"""

import json
import time
from functools import lru_cache
from pathlib import Path

import numpy as np
import pytest

from avgen import sde as S
from avgen.checkpoint import load_checkpoint
from avgen.cli import EXIT_OK, main
from avgen.diagnostics import gradcheck_suite, kernel_suite, sampler_oracle_suite
from avgen.metrics import wer
from avgen.signal import ComplexSpectrogram, Waveform, compress, decompress, istft, stft

E2E_BUDGET_S = 1800.0
BINS = ["[-6,-2)", "[-2,2)", "[2,6)", "[6,12]"]


@pytest.fixture
def record(acceptance_log):
    def _record(n: int, ok: bool, detail: str) -> None:
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        acceptance_log.append(line)
        print(line)
        assert ok, line

    return _record


def _failed(report):
    return [c for c in report["checks"] if not c["passed"]]


def test_criterion_1_perturbation_kernel(record):
    t0 = time.perf_counter()
    report = kernel_suite(n_paths=10_000, n_steps=1000, times=(0.25, 0.5, 1.0))
    dt = time.perf_counter() - t0
    worst = max(c["value"] for c in report["checks"])
    record(1, report["passed"] and dt < 30, f"worst relative error {worst:.4f} (tol 0.02), {dt:.1f}s (< 30s)")


def test_criterion_2_variance_ode(record):
    t0 = time.perf_counter()
    p, h = S.SdeParams(), 1e-6
    ts = np.random.default_rng(0).uniform(0.01, 0.99, 20)
    errs = []
    for t in ts:
        fd = (S.marginal_var(t + h, p) - S.marginal_var(t - h, p)) / (2 * h)
        rhs = -2 * p.gamma * S.marginal_var(t, p) + S.diffusion(t, p) ** 2
        errs.append(abs(fd - rhs) / abs(rhs))
    dt = time.perf_counter() - t0
    record(2, max(errs) < 1e-4 and dt < 1, f"max relative error {max(errs):.2e} (tol 1e-4), {dt:.3f}s (< 1s)")


def test_criterion_3_gradient_suite(record):
    t0 = time.perf_counter()
    reports = [gradcheck_suite(seed=s, n_params=96) for s in range(3)]
    dt = time.perf_counter() - t0
    names = {c["name"][8:-1] for r in reports for c in r["checks"]}
    covered = "agg.logits" in names and any(n.endswith(".kernel") for n in names) and "out.w" in names
    worst = max(c["value"] for r in reports for c in r["checks"])
    ok = all(r["passed"] for r in reports) and covered and dt < 120
    record(3, ok, f"{len(names)} tensors, worst relative error {worst:.2e} (tol 1e-5), {dt:.1f}s (< 120s)")


def test_criterion_4_sampler_oracle(record):
    t0 = time.perf_counter()
    report = sampler_oracle_suite(seed=0, steps=100, n_scalar=5000)
    dt = time.perf_counter() - t0
    vals = {c["name"]: c["value"] for c in report["checks"]}
    detail = f"rel err {vals['spectrogram_rel_err']:.4f} (< 0.05), KS {vals['scalar_ks_statistic']:.4f} (< 0.05), {dt:.1f}s (< 120s)"
    record(4, report["passed"] and dt < 120, detail)


def test_criterion_5_stft_round_trip(record):
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(100):
        x = rng.standard_normal(int(rng.integers(32_000, 192_001)))
        back = istft(stft(Waveform(x)), len(x)).samples
        worst = max(worst, np.linalg.norm(back - x) / np.linalg.norm(x))
    spec = stft(Waveform(rng.standard_normal(48_000)))
    inv = decompress(compress(spec)).data
    comp_err = np.max(np.abs(inv - spec.data)) / np.max(np.abs(spec.data))
    c = ComplexSpectrogram(compress(spec).data, compressed=True)
    comp_err = max(comp_err, np.max(np.abs(compress(decompress(c)).data - c.data)) / np.max(np.abs(c.data)))
    dt = time.perf_counter() - t0
    ok = worst < 1e-4 and comp_err < 1e-9 and dt < 30
    record(5, ok, f"round trip {worst:.2e} (< 1e-4), compression inverse {comp_err:.2e} (< 1e-9), {dt:.1f}s (< 30s)")


def _brute_edit_distance(ref, hyp):
    @lru_cache(maxsize=None)
    def go(i, j):
        if i == len(ref):
            return len(hyp) - j
        if j == len(hyp):
            return len(ref) - i
        return min(go(i + 1, j + 1) + (ref[i] != hyp[j]), go(i + 1, j) + 1, go(i, j + 1) + 1)

    return go(0, 0)


def test_criterion_6_wer_oracle(record):
    t0 = time.perf_counter()
    rng = np.random.default_rng(6)
    mismatches = identity_breaks = 0
    for _ in range(1000):
        ref = tuple(rng.choice(list("abcde"), rng.integers(1, 16)))
        hyp = tuple(rng.choice(list("abcde"), rng.integers(0, 16)))
        r = wer(list(ref), list(hyp))
        mismatches += r.S + r.D + r.I != _brute_edit_distance(ref, hyp)
        identity_breaks += r.wer * r.N != r.S + r.D + r.I
    dt = time.perf_counter() - t0
    ok = mismatches == 0 and identity_breaks == 0 and dt < 10
    record(6, ok, f"{mismatches} distance mismatches, {identity_breaks} identity breaks over 1000 pairs, {dt:.1f}s (< 10s)")


# -- end to end ------------------------------------------------------------------------


def _cli(*argv):
    code = main([str(a) for a in argv])
    assert code == EXIT_OK, f"{argv[0]} exited with {code}"


@pytest.fixture(scope="module")
def e2e(tmp_path_factory):
    root = tmp_path_factory.mktemp("e2e")
    corpus = root / "corpus"
    timings = {}
    t0 = time.perf_counter()
    _cli("synth-corpus", corpus)
    timings["synth"] = time.perf_counter() - t0
    out = {"noisy": {}, "val_loss": {}}
    for mode in ("av", "shuffled_emb"):
        ckpt = root / f"{mode}.avgc"
        t = time.perf_counter()
        _cli("train", corpus, ckpt, "--mode", mode)
        timings[f"train_{mode}"] = time.perf_counter() - t
        out["val_loss"][mode] = load_checkpoint(ckpt)[3]["val_loss"]
        t = time.perf_counter()
        _cli("enhance", ckpt, "--corpus", corpus, "--out-dir", root / f"est_{mode}")
        timings[f"enhance_{mode}"] = time.perf_counter() - t
        _cli("evaluate", corpus, root / f"est_{mode}", root / f"eval_{mode}.json")
        out[mode] = json.loads((root / f"eval_{mode}.json").read_text())
    _cli("evaluate", corpus, corpus / "noisy", root / "eval_noisy.json")
    out["noisy"] = json.loads((root / "eval_noisy.json").read_text())
    out["seconds"] = time.perf_counter() - t0
    out["timings"] = timings
    print(json.dumps({k: round(v, 1) for k, v in timings.items()}))
    return out


def test_criterion_7_end_to_end(e2e, record):
    gain = e2e["av"]["mean"]["si_sdr"] - e2e["noisy"]["mean"]["si_sdr"]
    wer_av, wer_sh = e2e["av"]["mean"]["wer"], e2e["shuffled_emb"]["mean"]["wer"]
    loss_av, loss_sh = e2e["val_loss"]["av"], e2e["val_loss"]["shuffled_emb"]
    ok = gain >= 3.0 and wer_av < wer_sh and loss_av < loss_sh and e2e["seconds"] < E2E_BUDGET_S
    detail = (
        f"SI-SDR gain {gain:+.2f} dB (>= 3), WER av {wer_av:.3f} vs shuffled {wer_sh:.3f}, "
        f"val loss av {loss_av:.2f} vs shuffled {loss_sh:.2f}, {e2e['seconds']:.0f}s (< {E2E_BUDGET_S:.0f}s)"
    )
    record(7, ok, detail)


def test_criterion_8_snr_trend(e2e, record):
    av, sh = e2e["av"]["by_snr_bin"], e2e["shuffled_emb"]["by_snr_bin"]
    populated = all(av[b]["count"] > 0 for b in BINS)
    gaps = [sh[b]["wer"] - av[b]["wer"] for b in BINS] if populated else []
    ok = populated and all(b <= a for a, b in zip(gaps, gaps[1:]))
    record(8, ok, "WER gap (shuffled - av) by rising SNR bin: " + ", ".join(f"{g:+.3f}" for g in gaps))


# -- determinism -----------------------------------------------------------------------

TINY = {
    "corpus": {"n_train": 4, "n_test": 4, "max_duration": 2.5, "embedding_layers": 3, "embedding_dim": 5},
    "net": {"channels": [2, 3, 4], "temb_dim": 4, "emb_layers": 3, "emb_dim": 5},
    "train": {"max_tokens": 600, "steps": 4},
    "sampler": {"steps": 3},
}


def _tree(d: Path) -> dict:
    return {str(p.relative_to(d)): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def _log_without_timing(path: Path) -> list:
    return [{k: v for k, v in json.loads(line).items() if k != "wall_ms"} for line in path.read_text().splitlines()]


def _pipeline(root: Path, cfg: Path, workers: int = 1) -> None:
    w = ("--workers", workers)
    _cli("synth-corpus", root / "corpus", "--config", cfg)
    _cli("train", root / "corpus", root / "m.avgc", "--config", cfg, *w)
    _cli("enhance", root / "m.avgc", "--corpus", root / "corpus", "--out-dir", root / "est", *w)
    noisy = root / "corpus" / "noisy" / "test_0001.wav"
    _cli("enhance", root / "m.avgc", noisy, root / "corpus" / "emb" / "test_0001.ave", root / "one.wav", "--seed", 11)
    _cli("evaluate", root / "corpus", root / "est", root / "eval.json", *w)
    _cli("diagnose", "kernel", "--out", root / "kernel.json")
    _cli("plot-spec", noisy, root / "spec.pgm")


def test_criterion_9_determinism(tmp_path, record):
    problems = []
    runs = {}
    for name, dtype, workers in (("a", "float32", 1), ("b", "float32", 1), ("c", "float64", 1), ("d", "float64", 3)):
        root = tmp_path / name
        root.mkdir()
        cfg = root / "cfg.json"
        cfg.write_text(json.dumps({**TINY, "train": {**TINY["train"], "dtype": dtype}}))
        _pipeline(root, cfg, workers)
        (root / "cfg.json").unlink()
        runs[name] = root
    # the training log carries wall-clock time per step; everything else must match byte for byte
    log = "m.avgc.log.jsonl"
    for x, y, what in (("a", "b", "serial repeat"), ("c", "d", "parallel vs serial, float64")):
        tx, ty = _tree(runs[x]), _tree(runs[y])
        if tx.keys() != ty.keys():
            problems.append(f"{what}: file sets differ")
            continue
        diff = [k for k in tx if k != log and tx[k] != ty[k]]
        if _log_without_timing(runs[x] / log) != _log_without_timing(runs[y] / log):
            diff.append(log)
        if diff:
            problems.append(f"{what}: {sorted(diff)}")
    record(9, not problems, "; ".join(problems) or f"{len(_tree(runs['a']))} artifacts identical for serial repeat and parallel float64")
