"""Acceptance criteria 1-9, one PASS/FAIL line each.

Run with ``pytest -v -s tests/test_acceptance.py`` or directly with
``python3 tests/test_acceptance.py``. Criteria 7 and 8 train several small
models and take roughly 25 minutes together on one core.
"""

import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from test_diagnostics import random_map, reference_triangles  # noqa: E402
from test_relpos import o_attention, o_delta_rho, random_params, run  # noqa: E402

from ddrplab import objectives as obj  # noqa: E402
from ddrplab.data import eval_sentences, synth_directional_corpus  # noqa: E402
from ddrplab.diagnostics import count_triangles, head_self_similarity, token_self_similarity  # noqa: E402
from ddrplab.experiments import compare_objectives, compare_triangles, final_pairs  # noqa: E402
from ddrplab.gradcheck import attention_grad_check, grad_check_config, model_grad_check, model_loss_fn  # noqa: E402
from ddrplab.model import forward, init_params, load_checkpoint  # noqa: E402
from ddrplab.relpos import (  # noqa: E402
    KINDS,
    RelPosIndexer,
    attention_ddrp,
    attention_shaw,
    ddrp_table,
    ddrp_vector_count,
    extra_param_count,
)
from ddrplab.tensor import Tensor, zero_grads  # noqa: E402
from ddrplab.training import TrainConfig, read_metrics, train  # noqa: E402

TRIANGLE_T = 0.5


def report(number: int, ok: bool, detail: str) -> str:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(line, flush=True)
    return line


# -- criteria -------------------------------------------------------------------------------


def criterion_1():
    t0 = time.perf_counter()
    full = {f"{k}/{o}": max(model_grad_check(k, o).values()) for k in KINDS for o in ("mlm", "mth")}
    full.update({f"{k}/{o}/groups2": max(model_grad_check(k, o, group_count=2).values())
                 for k in ("ddrp", "shaw") for o in ("mlm", "mth")})
    layer = {k: attention_grad_check(k) for k in KINDS}
    secs = time.perf_counter() - t0
    worst_full, worst_layer = max(full.values()), max(layer.values())
    ok = worst_full < 1e-4 and worst_layer < 1e-6 and secs < 120
    return ok, f"full-model max rel err {worst_full:.2e} (<1e-4), attention {worst_layer:.2e} (<1e-6), {secs:.0f}s"


def criterion_2():
    rng = np.random.default_rng(20)
    t0 = time.perf_counter()
    worst = 0.0
    for kind in KINDS:
        for _ in range(50):
            S, d, r_s = int(rng.integers(1, 9)), 3, int(rng.integers(1, 6))
            Q, K, V = (rng.normal(size=(S, d)) for _ in range(3))
            p = random_params(kind, rng, d, r_s)
            got = run(kind, Q, K, V, p, r_s).weights.data
            worst = max(worst, float(np.abs(got - o_attention(kind, Q, K, p, r_s)).max()))
    secs = time.perf_counter() - t0
    return worst < 1e-12 and secs < 30, f"max |vectorized - loop| {worst:.1e} over 5x50 draws, {secs:.1f}s"


def criterion_3():
    rng = np.random.default_rng(30)
    d, r_s, S = 4, 5, 8
    p = random_params("ddrp", rng, d, r_s)
    table = ddrp_table(*(Tensor(p[k]) for k in ("Ddir", "Krd", "Wrd"))).data
    gather_err = max(
        float(np.abs(table[dl, rho] - (p["Ddir"][rho] * p["Krd"][dl]) @ p["Wrd"]).max())
        for i in range(S) for j in range(S) for dl, rho in [o_delta_rho(i, j, r_s)]
    )
    Q, K, V = (rng.normal(size=(S, d)) for _ in range(3))
    Krd = rng.normal(size=(r_s, d))
    Kr = np.stack([Krd[min(abs(x), r_s - 1)] for x in range(-r_s, r_s)])
    shaw = attention_shaw(Tensor(Q), Tensor(K), Tensor(V), Tensor(Kr), RelPosIndexer(r_s))
    unit = ddrp_table(Tensor(np.ones((3, d))), Tensor(Krd), Tensor(np.eye(d)))
    ddrp = attention_ddrp(Tensor(Q), Tensor(K), Tensor(V), unit, RelPosIndexer(r_s))
    exact = np.array_equal(ddrp.weights.data, shaw.weights.data) and np.array_equal(ddrp.output.data, shaw.output.data)
    count, extra = ddrp_vector_count(64), extra_param_count("ddrp", 64, 64)
    ok = gather_err < 1e-12 and exact and count == 67 and extra == 8384
    return ok, f"(a) gather err {gather_err:.1e}; (b) equals shaw exactly: {exact}; (c) {count} vectors, {extra} params"


def _value_and_grads(params, loss):
    zero_grads(params.values())
    value = loss()
    value.backward()
    grads = {k: (np.zeros(p.shape) if p.grad is None else p.grad.copy()) for k, p in params.items()}
    zero_grads(params.values())
    return value.item(), grads


def criterion_4(tmp: Path):
    worst = 0.0
    for kind in KINDS:
        config = grad_check_config(kind)
        params = init_params(config, 0)
        v0, g0 = _value_and_grads(params, model_loss_fn(config, params, "mlm"))
        v1, g1 = _value_and_grads(params, model_loss_fn(config, params, "mth", step=(3, 3)))
        worst = max(worst, abs(v0 - v1), max(float(np.abs(g0[k] - g1[k]).max()) for k in params))

    corpus = synth_directional_corpus("copy-mixed", 200, 0, length=16)
    base = dict(preset="tiny", steps=12, batch_size=4, max_len=16, log_every=1, checkpoint_every=6)
    mlm = train(TrainConfig.from_dict({**base, "objective": "mlm"}), corpus, tmp / "mlm")
    zero = train(TrainConfig.from_dict({**base, "objective": "mth", "alpha1": 0, "alpha2": 0}), corpus, tmp / "zero")
    same_log = (tmp / "mlm/metrics.jsonl").read_bytes() == (tmp / "zero/metrics.jsonl").read_bytes()
    a, b = load_checkpoint(mlm.checkpoints[-1]), load_checkpoint(zero.checkpoints[-1])
    same_params = all(a.params[k].data.tobytes() == b.params[k].data.tobytes() for k in a.params)

    cfg = TrainConfig.from_dict({**base, "objective": "mth", "alpha1": 0.7, "alpha2": 0.3})
    train(cfg, corpus, tmp / "mth")
    records = read_metrics(tmp / "mth/metrics.jsonl")
    identity = all(r["total"] == r["mlm"] + 0.7 * r["T"] * r["tcd"] + 0.3 * r["T"] * r["hcd"] for r in records)
    ok = worst < 1e-12 and same_log and same_params and identity
    return ok, (f"T=0 diff {worst:.1e}; zero-weight run identical to MLM: {same_log and same_params}; "
                f"logged totals exact: {identity} ({len(records)} steps)")


def criterion_5():
    rng = np.random.default_rng(50)
    cfg = grad_check_config("ddrp")
    params = init_params(cfg, 1)
    trace = forward(rng.integers(5, cfg.vocab_size, size=cfg.max_len), cfg, params)
    fh = head_self_similarity([w.data for w in trace.attn_weights])
    hcd = obj.hcd_loss(trace.attn_weights, [np.arange(cfg.n_heads)] * cfg.n_layers).item()
    consistency = abs(fh - hcd)

    bounded = invariant = True
    for _ in range(100):
        c = float(np.exp(rng.uniform(np.log(0.05), np.log(20))))
        h, maps = rng.normal(size=(6, 4)), rng.normal(size=(3, 5, 5))
        tol_h = 4e-8 * (1 + 1 / c) / np.linalg.norm(h, axis=1).min() + 1e-12
        tol_m = 4e-8 * (1 + 1 / c) / np.linalg.norm(maps.reshape(3, -1), axis=1).min() + 1e-12
        pairs = [
            (token_self_similarity(h), token_self_similarity(c * h), tol_h),
            (head_self_similarity(maps[None]), head_self_similarity(c * maps[None]), tol_m),
            (obj.tcd_loss(Tensor(h), np.arange(6)).item(), obj.tcd_loss(Tensor(c * h), np.arange(6)).item(), tol_h),
            (obj.hcd_loss([Tensor(maps)], [np.arange(3)]).item(),
             obj.hcd_loss([Tensor(c * maps)], [np.arange(3)]).item(), tol_m),
        ]
        bounded &= all(-1 <= a <= 1 and -1 <= b <= 1 for a, b, _ in pairs)
        invariant &= all(abs(a - b) < tol for a, b, tol in pairs)
    ok = consistency < 1e-12 and bounded and invariant
    return ok, f"|f(H) - exhaustive HCD| {consistency:.1e}; bounded: {bounded}; scale-invariant: {invariant}"


def criterion_6():
    r = np.random.default_rng(60)
    agree = 0
    for _ in range(200):
        n_sent = int(r.integers(1, 12))
        ms = int(r.choice([8, 16, 64]))
        lengths = [int(r.integers(2, 20)) for _ in range(n_sent)]
        bias = r.normal(scale=1.5, size=2)
        pairs = [(random_map(r, n, ms, bias[0]), random_map(r, n, ms, bias[1])) for n in lengths]
        t = float(r.uniform(0.2, 0.7))
        agree += count_triangles(pairs, lengths, t, ms).matched == reference_triangles(pairs, lengths, t, ms)
    lengths = [int(r.integers(3, 30)) for _ in range(40)]
    pairs = [(random_map(r, n, 64, -1.0), random_map(r, n, 64, 1.0)) for n in lengths]
    counts = [count_triangles(pairs, lengths, t).matched for t in np.linspace(0.0, 0.9, 10)]
    monotone = all(a >= b for a, b in zip(counts, counts[1:]))
    return agree == 200 and monotone, f"{agree}/200 sets match the reference; monotone over 10 thresholds: {monotone}"


def criterion_7(tmp: Path):
    corpus = synth_directional_corpus("copy-mixed", 2000, 0)
    cfg = TrainConfig.from_dict(dict(preset="tiny", steps=5000, batch_size=8, lr=1e-3, warmup_ratio=0.01,
                                     log_every=100, checkpoint_every=1000))
    t0 = time.perf_counter()
    records = compare_objectives(cfg, corpus, tmp, [0, 1, 2], eval_sentences(corpus, cfg.max_len), 300)
    secs = time.perf_counter() - t0
    parts, wins = [], 0
    for seed, pair in sorted(final_pairs(records).items()):
        m, h = pair["mlm"], pair["mth"]
        win = h["token_similarity"] < m["token_similarity"] and h["head_similarity"] < m["head_similarity"]
        wins += win
        parts.append(f"seed {seed} f(S) {m['token_similarity']:.3f}->{h['token_similarity']:.3f} "
                     f"f(H) {m['head_similarity']:.3f}->{h['head_similarity']:.3f}")
    return wins == 3, f"MTH lower in {wins}/3 pairs ({'; '.join(parts)}), {secs / 60:.1f} min"


def criterion_8(tmp: Path):
    corpus = synth_directional_corpus("copy-mixed", 2000, 0)
    cfg = TrainConfig.from_dict(dict(preset="tiny", steps=3000, batch_size=8, lr=3e-3, log_every=500,
                                     checkpoint_every=3000))
    sentences = eval_sentences(corpus, cfg.max_len)[:200]
    t0 = time.perf_counter()
    records = compare_triangles(cfg, corpus, tmp, [0, 1, 2], sentences, t=TRIANGLE_T)
    secs = time.perf_counter() - t0
    by_seed: dict[int, dict[str, dict]] = {}
    for r in records:
        by_seed.setdefault(r["seed"], {})[r["kind"]] = r
    wins, above, parts = 0, True, []
    for seed, pair in sorted(by_seed.items()):
        d, s = pair["ddrp"], pair["shaw"]
        wins += d["trained"] > s["trained"]
        above &= d["trained"] > d["untrained"] and s["trained"] > s["untrained"]
        parts.append(f"seed {seed} ddrp {d['trained']:.3f} shaw {s['trained']:.3f} "
                     f"untrained {d['untrained']:.3f}/{s['untrained']:.3f}")
    ok = wins >= 2 and above
    return ok, f"t={TRIANGLE_T}: DDRP ahead in {wins}/3 ({'; '.join(parts)}), {secs / 60:.1f} min"


def criterion_9(tmp: Path):
    corpus = synth_directional_corpus("copy-mixed", 200, 0, length=16)
    cfg = TrainConfig.from_dict(dict(preset="tiny", steps=12, batch_size=4, max_len=16, log_every=1,
                                     checkpoint_every=4, objective="mth", encoding_kind="ddrp", group_count=2))
    a = train(cfg, corpus, tmp / "a")
    b = train(cfg, corpus, tmp / "b")
    repeat = (tmp / "a/metrics.jsonl").read_bytes() == (tmp / "b/metrics.jsonl").read_bytes() and all(
        x.read_bytes() == y.read_bytes() for x, y in zip(a.checkpoints, b.checkpoints)
    )
    part = train(cfg, corpus, tmp / "r", stop_at=6)
    resumed = train(cfg, corpus, tmp / "r", resume_from=part.checkpoints[-1])
    resume = (tmp / "a/metrics.jsonl").read_bytes() == (tmp / "r/metrics.jsonl").read_bytes() and (
        resumed.checkpoints[-1].read_bytes() == a.checkpoints[-1].read_bytes()
    )
    return repeat and resume, f"repeat byte-identical: {repeat}; resume equals straight run: {resume}"


# -- pytest wiring ---------------------------------------------------------------------------

NEEDS_TMP = {4, 7, 8, 9}
CRITERIA = {n: globals()[f"criterion_{n}"] for n in range(1, 10)}


@pytest.mark.parametrize("number", sorted(CRITERIA))
def test_criterion(number, tmp_path, capsys):
    fn = CRITERIA[number]
    ok, detail = fn(tmp_path) if number in NEEDS_TMP else fn()
    with capsys.disabled():
        print()
        report(number, ok, detail)
    assert ok, detail


if __name__ == "__main__":
    import tempfile

    failed = 0
    for n, fn in CRITERIA.items():
        with tempfile.TemporaryDirectory() as d:
            ok, detail = fn(Path(d)) if n in NEEDS_TMP else fn()
        report(n, ok, detail)
        failed += not ok
    sys.exit(1 if failed else 0)
