import csv

import pytest

from scdd.cli import main

TINY = """
kind = gidd_aligned
p_u = 0.2
T = 48
K = 6
L = 5
d = 8
h = 12
steps = 120
batch = 16
lr = 3e-3
warmup = 20
seed = 5
sample_steps = 4,8
sample_count = 3
eval_count = 16
mc_passes = 2
log_every = 60
ablate_steps = 40
ablate_traces = 8
"""


@pytest.fixture
def tiny_cfg(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY)
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_verify_command_passes(tmp_path, tiny_cfg):
    code = main(["verify", "--config", str(tiny_cfg),
                 "--out", str(tmp_path / "v")])
    assert code == 0
    rows = read_csv(tmp_path / "v" / "verification.csv")
    assert rows[0] == ["check", "max_deviation", "tolerance", "pass"]
    assert len(rows) - 1 >= 12
    assert all(row[3] == "pass" for row in rows[1:])


def test_verify_mask_only_degenerate_coincidence(tmp_path):
    # with the uniform channel off, the interpolating-kernel comparison
    # degenerates to an exact coincidence and verification still passes
    cfg = tmp_path / "mask.cfg"
    cfg.write_text("kind = mask_only\n")
    code = main(["verify", "--config", str(cfg), "--out", str(tmp_path)])
    assert code == 0
    rows = read_csv(tmp_path / "verification.csv")
    gidd = [r for r in rows if r[0] == "gidd_equivalence"]
    assert gidd and gidd[0][3] == "pass"


def test_train_sample_eval_pipeline(tmp_path, tiny_cfg):
    out = tmp_path / "run"
    assert main(["train", "--config", str(tiny_cfg),
                 "--out", str(out)]) == 0
    assert (out / "model.ckpt").exists()
    rows = read_csv(out / "train_metrics.csv")
    assert rows[0] == ["step", "reconstruction", "diffusion", "total", "ppl"]
    assert int(rows[-1][0]) == 120

    assert main(["sample", "--config", str(tiny_cfg),
                 "--checkpoint", str(out / "model.ckpt"),
                 "--out", str(out)]) == 0
    assert (out / "trace_N4_000.txt").exists()
    rows = read_csv(out / "corrections.csv")
    assert rows[0] == ["N", "p_u", "correction_rate",
                       "correction_rate_per_step"]
    assert [int(r[0]) for r in rows[1:]] == [4, 8]

    assert main(["eval", "--config", str(tiny_cfg),
                 "--checkpoint", str(out / "model.ckpt"),
                 "--out", str(out)]) == 0
    rows = read_csv(out / "eval.csv")
    assert rows[0] == ["val_ppl", "gen_ppl", "unigram_entropy"]
    val_ppl = float(rows[1][0])
    assert 1.0 < val_ppl < 36.0


def test_train_is_seed_deterministic(tmp_path, tiny_cfg):
    out1, out2 = tmp_path / "r1", tmp_path / "r2"
    assert main(["train", "--config", str(tiny_cfg), "--out",
                 str(out1)]) == 0
    assert main(["train", "--config", str(tiny_cfg), "--out",
                 str(out2)]) == 0
    assert (out1 / "model.ckpt").read_bytes() == \
        (out2 / "model.ckpt").read_bytes()


def test_seed_flag_overrides_config(tmp_path, tiny_cfg):
    out1, out2 = tmp_path / "r1", tmp_path / "r2"
    main(["train", "--config", str(tiny_cfg), "--out", str(out1),
          "--seed", "99"])
    main(["train", "--config", str(tiny_cfg), "--out", str(out2)])
    assert (out1 / "model.ckpt").read_bytes() != \
        (out2 / "model.ckpt").read_bytes()


def test_missing_checkpoint_is_usage_error(tmp_path, tiny_cfg):
    code = main(["sample", "--config", str(tiny_cfg),
                 "--checkpoint", str(tmp_path / "nope.ckpt"),
                 "--out", str(tmp_path)])
    assert code == 2


def test_corrupt_checkpoint_header_is_usage_error(tmp_path, tiny_cfg):
    out = tmp_path / "run"
    main(["train", "--config", str(tiny_cfg), "--out", str(out)])
    ckpt = out / "model.ckpt"
    ckpt.write_text(ckpt.read_text().replace("v1", "v9", 1))
    code = main(["eval", "--config", str(tiny_cfg),
                 "--checkpoint", str(ckpt), "--out", str(out)])
    assert code == 2


def test_invalid_config_is_usage_error(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("p_u = 1.0\n")
    assert main(["verify", "--config", str(bad),
                 "--out", str(tmp_path)]) == 2


def test_unknown_command_is_usage_error(tmp_path):
    assert main(["frobnicate"]) == 2


def test_eval_deterministic_source_near_unit_ppl(tmp_path):
    # a constant-sequence source has zero entropy; the trained model's
    # validation perplexity lands near 1
    chain = tmp_path / "chain.txt"
    chain.write_text("0 0 1 0\n" + "\n".join("0 0 1 0" for _ in range(4))
                     + "\n")
    cfg = tmp_path / "det.cfg"
    cfg.write_text("""
kind = gidd_aligned
p_u = 0.2
T = 64
K = 4
L = 5
d = 8
h = 16
steps = 500
batch = 16
warmup = 50
seed = 3
sample_steps = 8
sample_count = 4
eval_count = 24
mc_passes = 4
log_every = 0
source_kind = file
source_path = %s
""" % chain)
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    assert main(["eval", "--config", str(cfg),
                 "--checkpoint", str(out / "model.ckpt"),
                 "--out", str(out)]) == 0
    rows = read_csv(out / "eval.csv")
    assert float(rows[1][0]) <= 1.2


def test_eval_uniform_source_unigram_entropy(tmp_path):
    import math
    cfg = tmp_path / "uni.cfg"
    cfg.write_text("""
kind = gidd_aligned
p_u = 0.2
T = 64
K = 6
L = 5
d = 8
h = 12
steps = 200
batch = 16
warmup = 20
seed = 4
sample_steps = 8
sample_count = 4
eval_count = 96
mc_passes = 2
log_every = 0
source_kind = uniform
""")
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    assert main(["eval", "--config", str(cfg),
                 "--checkpoint", str(out / "model.ckpt"),
                 "--out", str(out)]) == 0
    rows = read_csv(out / "eval.csv")
    entropy = float(rows[1][2])
    assert abs(entropy - math.log(6.0)) <= 0.1


def test_ablate_writes_sweeps(tmp_path, tiny_cfg):
    out = tmp_path / "ab"
    assert main(["ablate", "--config", str(tiny_cfg),
                 "--out", str(out)]) == 0
    rows = read_csv(out / "ablate_sweep.csv")
    assert rows[0] == ["N", "p_u", "correction_rate",
                       "correction_rate_per_step"]
    assert len(rows) - 1 == 6  # 3 noise ratios x 2 step counts
    for tag in ("25", "75"):
        rows = read_csv(out / f"ablate_curve_tpeak{tag}.csv")
        assert rows[0] == ["step", "cumulative_fraction"]
        fracs = [float(r[1]) for r in rows[1:]]
        assert all(a <= b + 1e-12 for a, b in zip(fracs, fracs[1:]))
