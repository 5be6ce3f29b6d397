"""Exit criteria. Each test prints one ``[ACCEPT]`` line with its verdict.

Criteria 5-7 train the desk-scale model (``configs/desk.ini``) several
times; expect roughly half an hour on a single CPU core.
"""

import functools
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from conftest import VERDICTS
from gradcheck_util import far_from_zero, max_rel_error
from sdlayernet import cli
from sdlayernet import losses as L
from sdlayernet import topo
from sdlayernet.config import load_config
from sdlayernet.networks import SDLayerNet
from sdlayernet.synthdata import generate_dataset
from sdlayernet.trainer import evaluate, train

DESK = Path(__file__).resolve().parents[1] / "configs" / "desk.ini"
SEEDS = (0, 1, 2)


EMIT = print


@pytest.fixture(autouse=True)
def _terminal(request):
    # the terminal reporter writes past pytest's output capture
    global EMIT
    reporter = request.config.pluginmanager.get_plugin("terminalreporter")
    EMIT = (lambda line: reporter.write_line(line)) if reporter else print


def verdict(name, ok, detail):
    line = f"[ACCEPT] {name}: {'PASS' if ok else 'FAIL'}  {detail}"
    VERDICTS.append(line)
    EMIT("")
    EMIT(line)
    assert ok, f"{name}: {detail}"


# -- 1 -------------------------------------------------------------------------

def _brute_force_layers(y, H):
    S, W = y.shape
    out = np.zeros((S, H, W))
    for s in range(S):
        for i in range(W):
            nxt = y[s + 1, i] if s + 1 < S else H
            for r in range(H):
                out[s, r, i] = float(y[s, i] <= r < nxt)
    return out


def test_c1_topological_engine_oracle():
    rng = np.random.default_rng(2024)
    start, exact, n = time.perf_counter(), 0, 200
    for _ in range(n):
        S, H, W = rng.integers(1, 6), rng.integers(2, 33), rng.integers(1, 17)
        y = np.sort(rng.integers(0, H, size=(S, W)), axis=0)
        P = np.zeros((S, H, W))
        for s in range(S):
            P[s, y[s], np.arange(W)] = 1.0
        soft = topo.decompose_layers(topo.enforce_map_ordering(topo.cumulative_maps(torch.from_numpy(P))))
        exact += np.array_equal(topo.binarize(soft).numpy(), _brute_force_layers(y, H))
    elapsed = time.perf_counter() - start
    verdict("C1 topological-engine oracle", exact == n and elapsed < 10,
            f"{exact}/{n} instances exact, {elapsed:.2f}s (limit 10s)")


# -- 2 -------------------------------------------------------------------------

def _gradient_cases(g):
    """Map of name -> (fn, x, usable) at one random point; usable is False near a kink."""
    S, H, W = 3, 6, 12
    k = L.PriorConstants(c=[0.3] * S, o=[0.15] * S, delta=4, t=1.2, sigma=0.7)
    logits = torch.randn(S, H, W, generator=g, dtype=torch.float64)
    P = topo.columnwise_softmax(logits)
    mu = torch.rand(S, W, generator=g, dtype=torch.float64) * (H - 1)
    x = torch.randn(H, W, generator=g, dtype=torch.float64)
    y = torch.randn(S, W, generator=g, dtype=torch.float64) * 2
    ry = topo.rectify_surfaces(y)
    C = topo.cumulative_maps(P)

    # kinks: ramps and absolute values at zero; reject points near them
    prev = [y[0]]
    for s in range(1, S):
        prev.append(prev[-1] + torch.relu(y[s] - prev[-1]))
    rect_ok = far_from_zero(torch.stack([y[s] - prev[s - 1] for s in range(1, S)]))
    M = [C[0]]
    args = []
    for s in range(1, S):
        args.append(C[s] + M[-1] - 1)
        M.append(torch.relu(args[-1]))
    enforce_ok = far_from_zero(torch.stack(args), 1e-4)
    jump = ry[:, 1:] - ry[:, :-1]
    slope = (ry[:, 4:] - ry[:, :-4]) / 4
    prior_ok = (
        far_from_zero(y[1:] - y[:-1]) and far_from_zero(jump) and far_from_zero(jump.abs() - 0.3)
        and far_from_zero(slope) and far_from_zero(slope.abs() - 0.15)
        and far_from_zero(L.pmf_std(P) - 1.2)
    )
    mean, logvar = torch.randn(2, 5, generator=g), torch.randn(2, 5, generator=g)
    return {
        "columnwise_softmax": (topo.columnwise_softmax, logits, True),
        "expected_positions": (topo.expected_positions, P, True),
        "rectify_surfaces": (topo.rectify_surfaces, y, rect_ok),
        "cumulative_maps": (topo.cumulative_maps, P, True),
        "enforce_map_ordering": (topo.enforce_map_ordering, C, enforce_ok),
        "decompose_layers": (lambda m: topo.decompose_layers(m, atol=1.0), topo.enforce_map_ordering(C), True),
        "kl_supervised": (lambda z: L.kl_supervised(topo.columnwise_softmax(z), mu, 0.5), logits, True),
        "mse_supervised": (lambda z: L.mse_supervised(z, mu), y, True),
        "loss_topo": (L.loss_topo, y, prior_ok),
        "loss_continuity": (lambda z: L.loss_continuity(z, k), ry, prior_ok),
        "loss_slope": (lambda z: L.loss_slope(z, k), ry, prior_ok),
        "loss_std": (lambda z: L.loss_std(topo.columnwise_softmax(z), k), logits, prior_ok),
        "loss_vae_kl[mean]": (lambda m: L.loss_vae_kl(m, logvar.double()), mean, True),
        "loss_vae_kl[logvar]": (lambda v: L.loss_vae_kl(mean.double(), v), logvar, True),
        "loss_reconstruction_masked": (lambda z: L.loss_reconstruction_masked(x, z, ry), x + 0.37, True),
        "total_loss": (lambda v: L.total_loss(*v, weights=L.LossWeights()).total, torch.rand(8, generator=g), True),
    }


def test_c2_gradient_suite():
    g = torch.Generator().manual_seed(11)
    start = time.perf_counter()
    checked: dict[str, list[float]] = {}
    attempts = 0
    while min((len(v) for v in checked.values()), default=0) < 20 and attempts < 200:
        attempts += 1
        for name, (fn, x, ok) in _gradient_cases(g).items():
            if ok and len(checked.setdefault(name, [])) < 20:
                checked[name].append(max_rel_error(fn, x))
    elapsed = time.perf_counter() - start
    worst = {k: max(v) for k, v in checked.items()}
    counts_ok = all(len(v) >= 20 for v in checked.values()) and len(checked) == 16
    ok = counts_ok and max(worst.values()) < 1e-3 and elapsed < 60
    name, err = max(worst.items(), key=lambda kv: kv[1])
    verdict("C2 finite-difference gradient suite", ok,
            f"{len(checked)} operations x >=20 points, worst {name} rel err {err:.2e} (limit 1e-3), {elapsed:.1f}s (limit 60s)")


# -- 3 -------------------------------------------------------------------------

def test_c3_ordering_invariants():
    g = torch.Generator().manual_seed(5)
    violations, negatives = 0, 0
    for _ in range(1000):
        S, H, W = (int(v) for v in torch.randint(1, 9, (3,), generator=g) * torch.tensor([1, 4, 2]))
        y = topo.rectify_surfaces(torch.randn(S, W, generator=g) * 20)
        violations += int((y[1:] - y[:-1] < 0).sum())
        P = topo.columnwise_softmax(torch.randn(S, H, W, generator=g) * 5)
        layers = topo.surfaces_to_layers(P)
        negatives += int((layers < -1e-6).sum())
    verdict("C3 ordering invariants", violations == 0 and negatives == 0,
            f"{violations} ordering violations, {negatives} negative layer entries over 1000 inputs")


# -- 4 -------------------------------------------------------------------------

def test_c4_loss_zero_cases():
    k = L.PriorConstants(c=[1.0, 1.0], o=[0.5, 0.5], delta=10, t=1.0, sigma=0.5)
    mu = torch.tensor([[1.2, 2.0, 2.7], [3.5, 4.0, 4.4]], dtype=torch.float64)
    T = L.gaussian_target(mu, 8, 0.5)
    T = T / T.sum(dim=-2, keepdim=True)
    flat = torch.full((2, 20), 3.0, dtype=torch.float64)
    x = torch.randn(10, 20, dtype=torch.float64)
    cases = {
        "kl(P=T)": L.kl_supervised(T, mu, 0.5),
        "mse(y=mu)": L.mse_supervised(mu, mu),
        "topo(rectified)": L.loss_topo(topo.rectify_surfaces(torch.randn(4, 9, dtype=torch.float64))),
        "continuity(flat)": L.loss_continuity(flat, k),
        "slope(flat)": L.loss_slope(flat, k),
        "std(one-hot)": L.loss_std(torch.eye(8, dtype=torch.float64)[:3].T.reshape(1, 8, 3).expand(2, 8, 3), k),
        "vae_kl(0,0)": L.loss_vae_kl(torch.zeros(3, 8), torch.zeros(3, 8)),
        "rec(xhat=x)": L.loss_reconstruction_masked(x, x, torch.tensor([[2.0] * 20, [7.0] * 20])),
        "total(0)": L.total_loss().total,
    }
    worst = {n: abs(float(v)) for n, v in cases.items()}
    name, val = max(worst.items(), key=lambda kv: kv[1])
    verdict("C4 loss zero-cases", val <= 1e-6, f"{len(cases)} cases, largest |value| {val:.1e} ({name})")


# -- 5, 6, 7: desk-scale training ------------------------------------------------

VARIANTS = {
    "full": {},
    "supervised-only": {"supervised_only": True},
    "no-self-losses": {"disable_self_losses": True},
    "no-texture": {"disable_texture_head": True},
}


@functools.cache
def desk_run(variant: str, seed: int) -> dict:
    base = load_config(DESK)
    cfg = load_config(DESK, {"synth.seed": seed, "train.seed": seed,
                             **{f"train.{k}": v for k, v in VARIANTS[variant].items()}})
    assert cfg.synth == load_config(DESK, {"synth.seed": seed}).synth and base.model == cfg.model
    data = generate_dataset(cfg.synth)
    split = {k: [s for s in data if s.split == k] for k in ("train", "val", "test")}
    model_cfg = cfg.model
    if cfg.train.disable_texture_head:
        model_cfg = type(model_cfg)(**{**model_cfg.__dict__, "texture_head": False})
    torch.manual_seed(seed)
    init_rec = evaluate(SDLayerNet(model_cfg), split["val"]).rec_mae
    start = time.perf_counter()
    result = train(split["train"], split["val"], cfg.train, cfg.model)
    elapsed = time.perf_counter() - start
    val = evaluate(result.model, split["val"])
    test = evaluate(result.model, split["test"])
    run = dict(val=val.mean_rmse, test=test.mean_rmse, init_rec=init_rec, rec=val.rec_mae,
               seconds=elapsed, best_step=result.best_step, violations=test.violations)
    EMIT(
        f"  [{variant} seed {seed}] val {run['val']:.3f} px, test {run['test']:.3f} px, "
        f"rec MAE {init_rec:.3f} -> {run['rec']:.3f}, best step {run['best_step']}, {elapsed:.0f}s"
    )
    return run


@pytest.mark.slow
def test_c5_semi_supervised_beats_supervised_only():
    full = [desk_run("full", s) for s in SEEDS]
    sup = [desk_run("supervised-only", s) for s in SEEDS]
    wins = sum(f["val"] < s["val"] for f, s in zip(full, sup))
    test_rmse = float(np.mean([f["test"] for f in full]))
    minutes = sum(r["seconds"] for r in full + sup) / 60
    detail = (
        f"val RMSE full {[round(f['val'], 3) for f in full]} vs supervised-only "
        f"{[round(s['val'], 3) for s in sup]} -> {wins}/3 wins (need >=2); "
        f"mean test RMSE {test_rmse:.3f} px (limit 3.0); {minutes:.1f} min (limit 30)"
    )
    verdict("C5 trend reproduction", wins >= 2 and test_rmse < 3.0 and minutes <= 30, detail)


@pytest.mark.slow
@pytest.mark.parametrize("ablation", ["no-self-losses", "no-texture"])
def test_c6_ablation_direction(ablation):
    full = float(np.mean([desk_run("full", s)["test"] for s in SEEDS]))
    ablated = float(np.mean([desk_run(ablation, s)["test"] for s in SEEDS]))
    verdict(f"C6 ablation direction ({ablation})", ablated >= full,
            f"mean test RMSE over 3 seeds: full {full:.3f} px, {ablation} {ablated:.3f} px")


@pytest.mark.slow
def test_c7_reconstruction_sanity():
    runs = [desk_run("full", s) for s in SEEDS]
    ratios = [r["rec"] / r["init_rec"] for r in runs]
    verdict("C7 reconstruction sanity", all(q < 0.5 for q in ratios),
            f"val masked MAE trained/initial = {[round(q, 3) for q in ratios]} (limit < 0.5)")


# -- 8 -------------------------------------------------------------------------

def test_c8_cmd_train_determinism(tmp_path):
    data = tmp_path / "data"
    assert cli.main(["synth", "--config", str(DESK), "--seed", "3", "--out", str(data)]) == 0
    outs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        rc = cli.main(["train", "--config", str(DESK), "--data", str(data), "--out", str(out),
                       "--seed", "3", "--iterations", "30"])
        assert rc == 0
        outs.append(out)
    names = ["train_log.csv", "best.pt", "last.pt", "prior_constants.txt", "config.ini"]
    same = [n for n in names if (outs[0] / n).read_bytes() == (outs[1] / n).read_bytes()]
    verdict("C8 determinism", len(same) == len(names), f"{len(same)}/{len(names)} artifacts bitwise identical")
