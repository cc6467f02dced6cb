import csv
import logging

import numpy as np
import pytest

from dmm import serialize
from dmm import tensor as T
from dmm.backbone import BackboneConfig
from dmm.cli import main
from dmm.harness import (
    Check,
    DivergenceError,
    HarnessConfig,
    HarnessError,
    blocked_attention,
    coverage_gap,
    default_checks,
    loglog_slope,
    run_gradcheck,
    run_overfit,
    run_scaling_bench,
    run_sfac_report,
)
from dmm.sfac import Box, write_annotations
from dmm.tensor import Tensor

TINY = BackboneConfig(stem_channels=2, depths=(1, 1), widths=(2, 3), n_state=2)


def tiny_cfg(tmp_path, **kw):
    base = dict(out=str(tmp_path), backbone=TINY, n_pairs=2, image_size=16, steps=3, tpa_steps=3)
    base.update(kw)
    return HarnessConfig(**base)


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_ini_config(tmp_path):
    ini = tmp_path / "c.ini"
    ini.write_text(
        "[harness]\nseed = 7\nprecision = 32\n"
        "[backbone]\nwidths = 4, 6\ndepths = 1 1\nn_state = 3\n"
        "[bench]\nlengths = 8 16 32\ntrials = 1\n"
        "[overfit]\nsteps = 12\nlr = 0.5\n"
        "[dcfm]\nreverse_branch = no\n"
    )
    cfg = HarnessConfig.from_ini(ini, seed=9)
    assert cfg.seed == 9 and cfg.precision == 32
    assert cfg.backbone.widths == (4, 6) and cfg.backbone.n_state == 3
    assert cfg.bench_lengths == (8, 16, 32) and cfg.steps == 12 and cfg.lr == 0.5
    assert cfg.reverse_branch is False


def test_ini_rejects_unknown_key(tmp_path):
    ini = tmp_path / "c.ini"
    ini.write_text("[overfit]\nmomentum = 0.9\n")
    with pytest.raises(ValueError):
        HarnessConfig.from_ini(ini)


def test_config_validation():
    with pytest.raises(ValueError):
        HarnessConfig(precision=16)
    with pytest.raises(ValueError):
        HarnessConfig(bench_lengths=(64, 32))
    with pytest.raises(ValueError):
        HarnessConfig(n_pairs=17)


def test_checks_cover_every_registered_op():
    assert coverage_gap(default_checks()) == set()


def _broken_check():
    def build(rng):
        x = Tensor(rng.normal(size=4), requires_grad=True)

        def f(x):
            y = T._make("sloppy_square", x.data**2, (x,), lambda g: (g * 2.2 * x.data,))
            return T.tsum(y)

        return f, [x]

    return Check("sloppy_square", (), build)


def test_gradcheck_refuses_coverage_gap(tmp_path):
    checks = [c for c in default_checks() if c.name in ("exp", "mul")]
    with pytest.raises(HarnessError):
        run_gradcheck(tiny_cfg(tmp_path), checks)


def test_gradcheck_negative_control(tmp_path):
    # every op-level check plus one op with a deliberately wrong backward rule
    checks = [c for c in default_checks() if c.covers] + [_broken_check()]
    rows = run_gradcheck(tiny_cfg(tmp_path), checks)
    assert len(rows) == len(checks)
    assert [r.name for r in rows if not r.passed] == ["sloppy_square"]
    table = read_rows(tmp_path / "gradcheck.csv")
    assert table[0] == ["check", "max_rel_error", "coords", "ambiguous", "status"]
    assert len(table) == len(checks) + 1
    assert table[-1][-1] == "FAIL"


def test_gradcheck_requires_64_bit(tmp_path):
    with pytest.raises(HarnessError):
        run_gradcheck(tiny_cfg(tmp_path, precision=32))


def test_loglog_slope_exact():
    L = np.array([10, 20, 40, 80])
    assert loglog_slope(L, 3e-6 * L**2) == pytest.approx(2.0, abs=1e-12)
    assert loglog_slope(L, 5e-4 * L) == pytest.approx(1.0, abs=1e-12)


def test_blocked_attention_matches_dense(rng):
    q, k, v = (rng.normal(size=(37, 4)) for _ in range(3))
    s = q @ k.T / 2.0
    p = np.exp(s - s.max(axis=1, keepdims=True))
    want = (p / p.sum(axis=1, keepdims=True)) @ v
    np.testing.assert_allclose(blocked_attention(q, k, v, block=8), want, rtol=0, atol=1e-12)


def test_small_bench_writes_csv(tmp_path):
    cfg = tiny_cfg(tmp_path, bench_lengths=(64, 128), bench_trials=1, bench_dim=2, bench_state=2)
    res = run_scaling_bench(cfg)
    assert res.lengths == [64, 128] and len(res.attn_mean) == 2
    rows = read_rows(tmp_path / "bench_scan.csv")
    assert rows[0] == ["L", "mean_seconds", "std", "flops"]
    assert [r[0] for r in rows[1:]] == ["64", "128"]
    assert rows[1][3] == str(5 * 64 * 4 + 2 * 64 * 2)


def test_overfit_is_deterministic_and_keeps_tpa_frozen(tmp_path):
    a = run_overfit(tiny_cfg(tmp_path / "a"))
    b = run_overfit(tiny_cfg(tmp_path / "b"))
    assert a.rows == b.rows
    assert a.tpa_before == a.tpa_after
    assert len(a.rows) == 4
    assert (tmp_path / "a" / "overfit_loss.csv").read_bytes() == (tmp_path / "b" / "overfit_loss.csv").read_bytes()
    assert read_rows(tmp_path / "a" / "overfit_loss.csv")[0] == [
        "step", "det_cls", "det_reg", "aux_cls", "aux_reg", "total"
    ]
    ckpt = np.load(tmp_path / "a" / "checkpoint.npz")
    assert any(k.startswith("tpa.") for k in ckpt.files)
    assert (tmp_path / "a" / "attention" / "mta" / "pair000.dmmt").exists()


def test_overfit_divergence_aborts(tmp_path):
    with pytest.raises(DivergenceError):
        run_overfit(tiny_cfg(tmp_path, lr=1e4, steps=5))


def _maps(tmp_path, name, planted):
    d = tmp_path / name
    d.mkdir()
    rng = np.random.default_rng(0)
    for i in range(3):
        m = rng.uniform(size=(16, 16))
        if planted:
            m[4:8, 4:8] += 2.0
        serialize.save(m, d / f"img{i}.dmmt")
    return d


def test_sfac_report_compare_and_missing(tmp_path, caplog):
    base = _maps(tmp_path, "base", planted=False)
    planted = _maps(tmp_path, "planted", planted=True)
    ann = tmp_path / "ann.csv"
    boxes = {f"img{i}": [Box(6.0, 6.0, 4.0, 4.0)] for i in range(4)}  # img3 has no map
    write_annotations(ann, boxes)
    cfg = tiny_cfg(tmp_path / "out")
    with caplog.at_level(logging.WARNING):
        first, second = run_sfac_report(cfg, base, ann, planted)
    assert first.missing == second.missing == 1
    assert second.report.sfac_all > first.report.sfac_all
    delta = read_rows(tmp_path / "out" / "sfac_delta.csv")
    assert delta[0] == ["bucket", "sfac_a", "sfac_b", "delta", "relative"]
    assert float(delta[1][3]) > 0


def test_sfac_empty_annotations_error(tmp_path):
    ann = tmp_path / "empty.csv"
    ann.write_text("image_id,cx,cy,w,h,angle_deg,class\n")
    with pytest.raises(HarnessError):
        run_sfac_report(tiny_cfg(tmp_path / "out"), tmp_path, ann)
    assert not (tmp_path / "out" / "sfac.csv").exists()


def test_cli_gen_and_sfac(tmp_path, capsys):
    assert main(["gen", "--out", str(tmp_path), "-n", "2", "--size", "32", "--seed", "3"]) == 0
    pairs = tmp_path / "pairs"
    assert serialize.load(pairs / "pair001_rgb.dmmt").shape == (3, 32, 32)
    # feed the masks back as attention maps: extra mass inside the boxes
    att = tmp_path / "att"
    att.mkdir()
    for i in range(2):
        serialize.save(serialize.load(pairs / f"pair00{i}_mask.dmmt").data[0] + 0.1, att / f"pair00{i}.dmmt")
    code = main(["sfac", "--out", str(tmp_path), "--attention", str(att), "--annotations", str(pairs / "annotations.csv")])
    assert code == 0
    assert "SFAC@all" in capsys.readouterr().out


def test_cli_errors_exit_2(tmp_path, capsys):
    ann = tmp_path / "empty.csv"
    ann.write_text("")
    assert main(["sfac", "--out", str(tmp_path), "--attention", str(tmp_path), "--annotations", str(ann)]) == 2
    assert main(["gradcheck", "--out", str(tmp_path), "--precision", "32"]) == 2


def test_cli_bench_and_overfit_small(tmp_path):
    ini = tmp_path / "c.ini"
    ini.write_text(
        "[backbone]\nstem_channels = 2\nwidths = 2 3\ndepths = 1 1\nn_state = 2\n"
        "[overfit]\nn = 2\nimage_size = 16\nsteps = 2\n[tpa]\nsteps = 2\n"
    )
    # two steps cannot reach 10% of the initial loss, so the run reports failure
    assert main(["overfit", "--config", str(ini), "--out", str(tmp_path)]) == 1
    code = main(["bench", "--out", str(tmp_path), "--lengths", "32", "64", "--trials", "1", "--no-attention"])
    assert code in (0, 1)
    assert (tmp_path / "bench_summary.csv").exists()
