"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

Run ``pytest tests/test_acceptance.py -s`` to see the lines inline; they are also
collected into an "acceptance criteria" section of the terminal summary.
"""

import csv
import json
import math
import time

import numpy as np
import pytest

from effconf import autodiff as ad
from effconf.attention import AttentionVariant
from effconf.autodiff import DTensor
from effconf.checks import (CTC_GRAD_TOL, _ctc_fd, equivalence_suite, gradcheck_suite, random_ctc_instance,
                            relative_error)
from effconf.cli import bench_config, main
from effconf.ctc import ctc_brute_force, ctc_loss
from effconf.encoder import PRESETS, build, forward, get_preset, miniature_config
from effconf.profiler import TEN_SECONDS, attention_score_terms, count_madds, count_params, score_map_elements

EFF = get_preset("effconf-ctc-s")
EFF_REG = EFF.with_group_sizes([1, 1, 1])
RNNT = get_preset("effconf-rnnt-s")
RNNT_REG = RNNT.with_group_sizes([1, 1, 1])


def madds(cfg):
    return count_madds(cfg, TEN_SECONDS).total


@pytest.fixture(scope="module")
def equivalence():
    t0 = time.perf_counter()
    results = equivalence_suite(seed=0, cases=60, max_n=16)
    return {r.name: r for r in results}, time.perf_counter() - t0


def test_criterion_01_identity_collapses(equivalence, criterion):
    results, seconds = equivalence
    collapses = [r for name, r in results.items() if name.startswith("collapse/")]
    worst = max(r.worst for r in collapses)
    ok = len(collapses) == 3 and worst <= 1e-12 and seconds < 60
    criterion(1, "identity collapses", ok, f"60 cases, worst {worst:.1e} <= 1e-12, {seconds:.1f} s")


def test_criterion_02_oracle_equivalence(equivalence, criterion):
    results, seconds = equivalence
    oracles = {name: r for name, r in results.items() if name.startswith("oracle/")}
    worst = max(r.worst for r in oracles.values())
    ok = len(oracles) == 5 and worst <= 1e-10 and seconds < 60
    criterion(2, "oracle equivalence", ok, f"{', '.join(sorted(oracles))}: worst {worst:.1e} <= 1e-10")


def test_criterion_03_skew_exact(equivalence, criterion):
    r = equivalence[0]["skew/rel_to_abs n=1..32"]
    criterion(3, "rel_to_abs skew exact", r.worst == 0.0, f"n=1..32, max |diff| = {r.worst:.1e}")


def test_criterion_04_gradient_suite(criterion):
    t0 = time.perf_counter()
    results = gradcheck_suite(seed=0)
    seconds = time.perf_counter() - t0
    worst = max(results, key=lambda r: r.worst)
    failed = [r.name for r in results if not r.passed]
    ok = not failed and any(r.name.startswith("encoder/") for r in results) and seconds < 300
    criterion(4, "gradient suite", ok,
              f"{len(results)} checks, worst {worst.worst:.1e} ({worst.name}), {seconds:.0f} s, failed: {failed or 'none'}")


MADDS_TABLE = [
    ("efficient ctc g=1,1,1", EFF_REG, 3.91e9, 0.15),
    ("efficient ctc g=3,1,1", EFF, 3.51e9, 0.15),
    ("efficient ctc g=5,3,1", EFF.with_group_sizes([5, 3, 1]), 3.29e9, 0.15),
    ("efficient ctc g=9,5,3", EFF.with_group_sizes([9, 5, 3]), 3.16e9, 0.15),
    ("local 175,-,-", EFF_REG.with_windows([175, None, None]), 3.49e9, 0.15),
    ("local 130,130,-", EFF_REG.with_windows([130, 130, None]), 3.29e9, 0.15),
    ("local 100,100,100", EFF_REG.with_windows([100, 100, 100]), 3.21e9, 0.15),
    ("linear", EFF_REG.with_attention("linear"), 2.87e9, 0.15),
    ("rnnt prog-down", RNNT_REG, 2.84e9, 0.15),
    ("rnnt attention-down", RNNT_REG.with_downsampling("attention"), 2.75e9, 0.15),
    ("rnnt g=3,1,1", RNNT, 2.51e9, 0.15),
    ("baseline ctc", get_preset("conformer-ctc-s"), 5.41e9, 0.35),
    ("baseline rnnt", get_preset("conformer-rnnt-s"), 3.73e9, 0.35),
]


def test_criterion_05_madds_table(criterion):
    misses = []
    worst = 0.0
    for label, cfg, target, band in MADDS_TABLE:
        rel = abs(madds(cfg) - target) / target
        worst = max(worst, rel / band)
        if rel > band:
            misses.append(f"{label} {madds(cfg) / 1e9:.2f}B")
    criterion(5, "MAdds table at 1000 frames", not misses,
              f"{len(MADDS_TABLE)} rows, worst {worst:.0%} of band used, misses: {misses or 'none'}")


RATIOS = [
    ("g=3,1,1 / g=1,1,1", EFF, EFF_REG, 0.898),
    ("g=5,3,1 / g=1,1,1", EFF.with_group_sizes([5, 3, 1]), EFF_REG, 0.841),
    ("g=9,5,3 / g=1,1,1", EFF.with_group_sizes([9, 5, 3]), EFF_REG, 0.808),
    ("local 175 / regular", EFF_REG.with_windows([175, None, None]), EFF_REG, 0.893),
    ("linear / regular", EFF_REG.with_attention("linear"), EFF_REG, 0.734),
    ("rnnt prog-down / baseline", RNNT_REG, get_preset("conformer-rnnt-s"), 0.761),
    ("rnnt att-down / conv-down", RNNT_REG.with_downsampling("attention"), RNNT_REG, 0.968),
    ("ctc att-down / conv-down", EFF_REG.with_downsampling("attention"), EFF_REG, 0.969),
]


def test_criterion_06_ratio_suite(criterion):
    lines = []
    ok = True
    for label, num, den, target in RATIOS:
        r = madds(num) / madds(den)
        ok &= abs(r - target) <= 0.05
        lines.append(f"{label} {r:.3f} vs {target}")
    criterion(6, "MAdds ratio suite", ok, "; ".join(lines))


@pytest.mark.parametrize("n,g,s", [(12, 3, 2), (120, 4, 3), (1000, 5, 2), (64, 8, 4), (96, 2, 2)])
def test_criterion_07_analytic_exactness(n, g, s, criterion):
    d, heads = 64, 4
    reg = attention_score_terms(n, d, heads, AttentionVariant.regular())
    grp = attention_score_terms(n, d, heads, AttentionVariant.grouped(g))
    strided = attention_score_terms(n, d, heads, AttentionVariant.strided(s))
    # Q K^T and A V; the relative-position term is reported separately
    grouped_ok = (grp["content"] + grp["context"]) * g == reg["content"] + reg["context"]
    strided_ok = sum(strided.values()) * s == sum(reg.values())
    maps_ok = score_map_elements(n, heads, AttentionVariant.grouped(g)) * g * g == score_map_elements(
        n, heads, AttentionVariant.regular())
    criterion(7, f"analytic exactness n={n} g={g} s={s}", grouped_ok and strided_ok and maps_ok,
              f"grouped x g {grouped_ok}, strided x s {strided_ok}, maps / g^2 {maps_ok}")


PARAMS = [("conformer-ctc-s", 13.0e6), ("effconf-ctc-s", 13.2e6), ("conformer-ctc-m", 30.5e6),
          ("effconf-ctc-m", 31.5e6), ("conformer-ctc-l", 121.5e6), ("effconf-ctc-l", 125.6e6)]


def test_criterion_08_parameter_counts(criterion):
    got = {name: count_params(get_preset(name)) for name, _ in PARAMS}
    ok = all(abs(got[name] - target) / target <= 0.05 for name, target in PARAMS)
    detail = ", ".join(f"{name} {got[name] / 1e6:.2f}M" for name, _ in PARAMS)
    # the built model must hold exactly the analytic count
    built = build(get_preset("effconf-ctc-s")).num_params()
    ok &= built == got["effconf-ctc-s"]
    criterion(8, "parameter counts", ok, detail)


def test_criterion_09_length_law(criterion):
    lengths = range(8, 4097)
    configs = [c for c in PRESETS.values() if c.subsampling == 8] + [EFF.with_downsampling("attention")]
    analytic_ok = all(cfg.output_length(t) == math.ceil(t / 8) for cfg in configs for t in lengths)
    # the baselines keep a 4x stem and no stage downsampling
    baselines = [c for c in PRESETS.values() if c.subsampling == 4]
    analytic_ok &= all(cfg.output_length(t) == math.ceil(t / 4) for cfg in baselines for t in lengths)
    rng = np.random.default_rng(0)
    executed = list(range(8, 72)) + [127, 128, 129, 999, 1000, 1001, 2047, 4095, 4096]
    mismatches = []
    models = [build(miniature_config(groups=(3, 1, 1)), 0),
              build(miniature_config().with_downsampling("attention"), 0)]
    with ad.no_grad():
        for t in executed:
            for m in models:
                out = forward(m, DTensor(rng.normal(size=(t, m.config.input_features))))
                if out.sequence.shape[0] != math.ceil(t / 8):
                    mismatches.append((m.config.name, t))
    criterion(9, "length law ceil(t/8)", analytic_ok and not mismatches,
              f"analytic t=8..4096 over {len(configs)} configs; executed {len(executed)} lengths x 2 models, "
              f"mismatches {mismatches or 'none'}")


def test_criterion_10_ctc(criterion):
    rng = np.random.default_rng(0)
    worst_loss, feasible, checked = 0.0, 0, 0
    while checked < 250:
        inst = random_ctc_instance(rng)
        res = ctc_loss(inst)
        p = ctc_brute_force(inst)
        checked += 1
        if not res.feasible:
            worst_loss = max(worst_loss, 0.0 if p == 0.0 and res.neg_log_likelihood == np.inf else np.inf)
            continue
        feasible += 1
        worst_loss = max(worst_loss, abs(res.neg_log_likelihood + math.log(p)))
    worst_grad = 0.0
    for _ in range(60):
        inst = random_ctc_instance(rng)
        res = ctc_loss(inst)
        if res.feasible:
            worst_grad = max(worst_grad, relative_error(res.grad, _ctc_fd(inst)))
    ok = feasible >= 200 and worst_loss <= 1e-9 and worst_grad <= CTC_GRAD_TOL
    criterion(10, "CTC vs brute force", ok,
              f"{checked} instances ({feasible} feasible), loss err {worst_loss:.1e} <= 1e-9, "
              f"grad err {worst_grad:.1e} <= 1e-5")


def read_history(path):
    with open(path) as fh:
        return [{k: (None if v == "" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]


@pytest.mark.slow
def test_criterion_11_trainability(tmp_path, criterion):
    out = tmp_path / "train.csv"
    t0 = time.perf_counter()
    code = main(["train-toy", "--steps", "2000", "--target-accuracy", "0.9", "--seed", "0", "--out", str(out)])
    seconds = time.perf_counter() - t0
    history = read_history(out)
    last = history[-1]

    short = []
    for i in range(2):
        p = tmp_path / f"short{i}.json"
        main(["train-toy", "--steps", "12", "--log-every", "4", "--seed", "3", "--format", "json", "--out", str(p)])
        short.append(json.loads(p.read_text()))
    deterministic = short[0] == short[1] and len(short[0]) == 4

    ok = code == 0 and last["accuracy"] >= 0.9 and last["step"] <= 2000 and seconds < 600 and deterministic
    criterion(11, "toy trainability", ok,
              f"accuracy {last['accuracy']:.3f} at step {int(last['step'])}, {seconds:.0f} s, "
              f"repeat runs identical: {deterministic}")


@pytest.mark.slow
def test_criterion_12_benchmark_direction(criterion):
    frames = 2048
    grouped = bench_config(EFF, frames, repeats=5, seed=0)
    regular = bench_config(EFF_REG, frames, repeats=5, seed=0)
    ok = grouped["median_ms"] < regular["median_ms"]
    criterion(12, "benchmark direction", ok,
              f"{frames} frames: g=3,1,1 {grouped['median_ms']:.0f} ms < g=1,1,1 {regular['median_ms']:.0f} ms")
