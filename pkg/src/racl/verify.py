"""Self-verification suite run by ``racl verify``.

Each check returns ``(passed, detail)``. The suite is meant as a release
gate: gradient checks, EER oracle equivalence, loss identities and
determinism probes, all on small inputs so it finishes in well under a
minute.
"""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from racl import gradcheck
from racl.audio import AudioClip, Provenance, fix_length
from racl.augment import mean_power, mix_additive
from racl.evaluation import eer, eer_oracle
from racl.features import extract
from racl.losses import RaclWeights, contrastive, racl_total, variance_reg, weighted_ce
from racl.model import (
    Checkpoint,
    OptimizerState,
    adam_step,
    deserialize_checkpoint,
    forward,
    init_head,
    lr_at,
    serialize_checkpoint,
)
from racl.reconstruct import SpectrogramConfig, griffin_lim, istft, reconstruct_clip, stft

GRAD_TOL = 1e-4


def _tone(n=8000, sr=16000, f=440.0):
    t = np.arange(n) / sr
    return AudioClip(0.5 * np.sin(2 * np.pi * f * t) + 0.1 * np.sin(2 * np.pi * 3 * f * t), sr,
                     Provenance.BONAFIDE, "probe")


def check_gradients(batches: int = 3, seed: int = 0):
    rng = np.random.default_rng(seed)
    worst = dict.fromkeys(gradcheck.COMPONENTS, 0.0)
    for _ in range(batches):
        for comp, err in gradcheck.check_batch(rng).items():
            worst[comp] = max(worst[comp], err)
    bad = {k: v for k, v in worst.items() if not v < GRAD_TOL}
    detail = " ".join(f"{k}={v:.1e}" for k, v in worst.items())
    return not bad, detail


def check_input_gradients(seed: int = 1):
    rng = np.random.default_rng(seed)
    stack = gradcheck.check_stack_gradient(rng)
    head = gradcheck.check_head_input_gradient(rng)
    return max(stack, head) < GRAD_TOL, f"stack={stack:.1e} head_input={head:.1e}"


def check_eer_oracle(n_sets: int = 200, seed: int = 2):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_sets):
        nb, ns = rng.integers(1, 25, 2)
        if rng.random() < 0.5:
            b, s = rng.integers(0, 6, nb) / 5.0, rng.integers(0, 6, ns) / 5.0  # heavy ties
        else:
            b, s = rng.random(nb), rng.random(ns) + rng.uniform(-0.5, 0.5)
        worst = max(worst, abs(eer(b, s) - eer_oracle(b, s)))
        mono = abs(eer(np.exp(3 * b), np.exp(3 * s)) - eer(b, s))
        worst = max(worst, mono)
    return worst < 1e-9, f"max |delta|={worst:.1e}"


def check_loss_identities():
    w = RaclWeights()
    a = np.zeros((1, 3))
    ok = contrastive(a, a, [1.0])[0] == 0.0
    ok &= contrastive(a, a + [1.5, 0, 0], [0.0], 1.0)[0] == 0.0
    reg, _ = variance_reg(np.ones((5, 4)), 1e-4)
    ok &= abs(reg - (-0.99)) <= 1e-12
    ok &= w.ce_coefficient == 0.3
    rng = np.random.default_rng(3)
    emb, logits = rng.normal(size=(8, 4)), rng.normal(size=(8, 2))
    prov = list(Provenance) * 2
    zero = RaclWeights(alpha=0.0, beta=0.0, gamma=0.0)
    ce, g = weighted_ce(logits, [p.binary() for p in prov], zero.class_weights)
    br = racl_total(emb, logits, prov, zero)
    ok &= br.total == ce and np.array_equal(br.grad_logits, g) and not br.grad_embedding.any()
    return bool(ok), f"reg(identical)={reg!r} ce_coef={w.ce_coefficient!r}"


def check_optimizer_and_schedule():
    st = OptimizerState(weight_decay=0.0)
    p = {"x": np.zeros(1)}
    adam_step(st, p, {"x": np.ones(1)}, 5e-4)
    first = float(p["x"][0])
    ok = abs(first - (-5e-4 / (1 + 1e-8))) < 1e-18
    lrs = [lr_at(e) for e in (0, 10, 25)]
    ok &= lrs == [5e-4, 2.5e-4, 1.25e-4]
    return bool(ok), f"first_step={first!r} lr={lrs}"


def check_checkpoint_roundtrip():
    rng = np.random.default_rng(4)
    params = {"kernel": rng.normal(size=3), **init_head(5, 4, 3, rng)}
    ck = Checkpoint(7, params, 0.125, "ab" * 32, {"train": {"seed": 688}})
    back = deserialize_checkpoint(serialize_checkpoint(ck))
    ok = back.epoch == 7 and back.val_loss == 0.125 and back.config == ck.config
    ok &= all(np.array_equal(back.params[k], v) for k, v in params.items())
    ok &= serialize_checkpoint(back) == serialize_checkpoint(ck)
    return bool(ok), f"{len(params)} tensors"


def check_audio_plumbing():
    rng = np.random.default_rng(5)
    clip = AudioClip(rng.normal(0, 0.1, 4000), 16000)
    noise = AudioClip(rng.normal(0, 0.3, 1500), 16000)
    worst = 0.0
    for snr in (0.0, 7.5, 15.0, 20.0):
        out = mix_additive(clip, noise, snr, rng, peak_guard=False)
        measured = 10 * np.log10(mean_power(clip.samples) / mean_power(out.samples - clip.samples))
        worst = max(worst, abs(measured - snr))
    once = fix_length(clip, 6001)
    ok = worst < 0.01 and np.array_equal(fix_length(once, 6001).samples, once.samples)
    return bool(ok), f"max SNR error={worst:.1e} dB"


def check_spectral():
    cfg = SpectrogramConfig(griffin_lim_iters=16)
    clip = _tone()
    spec = stft(clip, cfg)
    rt = np.linalg.norm(istft(spec, len(clip), cfg) - clip.samples) / np.linalg.norm(clip.samples)
    _, hist = griffin_lim(np.abs(spec), cfg, len(clip), 0)
    mono = bool(np.all(np.diff(hist) <= 1e-12))
    return rt < 1e-6 and mono, f"istft rel err={rt:.1e} GL monotone={mono}"


def check_determinism():
    clip = _tone(n=20000)
    a = extract(clip, 11, 4, 8).layers
    b = extract(clip, 11, 4, 8).layers
    cfg = SpectrogramConfig(griffin_lim_iters=4)
    r1, r2 = reconstruct_clip(clip, cfg, 9), reconstruct_clip(clip, cfg, 9)
    params = init_head(8, 6, 4, np.random.default_rng(6))
    f1, f2 = forward(a.mean(axis=0), params), forward(b.mean(axis=0), params)
    ok = np.array_equal(a, b) and np.array_equal(r1.samples, r2.samples)
    ok &= np.array_equal(f1[0], f2[0]) and np.array_equal(f1[1], f2[1])
    return bool(ok), "extract/reconstruct/forward bitwise stable"


CHECKS: dict[str, Callable[[], tuple[bool, str]]] = {
    "gradients_vs_finite_differences": check_gradients,
    "input_gradients": check_input_gradients,
    "eer_oracle_equivalence": check_eer_oracle,
    "loss_identities": check_loss_identities,
    "adam_and_lr_schedule": check_optimizer_and_schedule,
    "checkpoint_roundtrip": check_checkpoint_roundtrip,
    "snr_and_fix_length": check_audio_plumbing,
    "stft_and_griffin_lim": check_spectral,
    "determinism": check_determinism,
}


def run_checks(out=print) -> bool:
    width = max(map(len, CHECKS))
    all_ok = True
    for name, fn in CHECKS.items():
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        all_ok &= ok
        out(f"{'PASS' if ok else 'FAIL'}  {name:<{width}}  {time.perf_counter() - t0:6.2f}s  {detail}")
    out("all checks passed" if all_ok else "verification FAILED")
    return all_ok
