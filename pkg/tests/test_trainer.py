import math

import pytest
import torch

import oracles
from obrg import checkpoint as ckpt
from obrg.errors import CompatibilityError, ConfigError, CorruptionError, NumericError
from obrg.generation import replacement_ratio
from obrg.model import ALIGNMENT_GROUPS, build_model
from obrg.pipeline import make_split
from obrg.trainer import (
    StagePlan, clip_gradients, gen_steps_before, load_model, optimizer_step, read_metrics, run_stage1, run_stage2,
    stage1_plan, stage2_plan, stage2_schedule,
)
from obrg.verify import quick_config


@pytest.fixture(scope="module")
def quick():
    cfg = quick_config()
    train, _ = make_split(cfg)
    return cfg, train


@pytest.fixture(scope="module")
def stage1_run(quick, tmp_path_factory):
    cfg, train = quick
    out = tmp_path_factory.mktemp("s1")
    return run_stage1(cfg, train, out), out


# optimizer ---------------------------------------------------------------------

def test_adam_first_step_matches_hand_oracle():
    p = {"w": torch.tensor([1.0], dtype=torch.float64)}
    optimizer_step(p, {"w": torch.tensor([1.0], dtype=torch.float64)}, {}, lr=0.1)
    assert p["w"].item() == pytest.approx(oracles.adam_first_step(1.0, 1.0, 0.1), abs=1e-12)
    assert p["w"].item() == pytest.approx(0.9, abs=1e-6)


def test_zero_gradient_leaves_parameters_unchanged():
    w = torch.randn(3, 4)
    p = {"w": w.clone()}
    state = {}
    for _ in range(3):
        optimizer_step(p, {"w": torch.zeros(3, 4)}, state, lr=0.1)
    assert torch.equal(p["w"], w)
    assert state["t"] == 3


def test_optimizer_is_deterministic_and_names_bad_gradients():
    g = torch.randn(5)
    a, b = {"w": torch.ones(5)}, {"w": torch.ones(5)}
    sa, sb = {}, {}
    for _ in range(4):
        optimizer_step(a, {"w": g}, sa, 0.01)
        optimizer_step(b, {"w": g}, sb, 0.01)
    assert torch.equal(a["w"], b["w"])
    with pytest.raises(NumericError, match="layer.bias"):
        optimizer_step({"layer.bias": torch.ones(2)}, {"layer.bias": torch.tensor([1.0, math.inf])}, {}, 0.1)


def test_gradient_clipping():
    p = torch.nn.Parameter(torch.zeros(2))
    p.grad = torch.tensor([3.0, 4.0])
    assert clip_gradients({"p": p}, 1.0) == pytest.approx(5.0)
    assert p.grad.norm().item() == pytest.approx(1.0, abs=1e-5)


# plans -------------------------------------------------------------------------

def test_default_plans_partition_groups(quick):
    cfg, _ = quick
    s1, s2 = stage1_plan(cfg), stage2_plan(cfg)
    assert s1.trainable == ("backbone",) and set(s1.frozen) == set(ALIGNMENT_GROUPS)
    assert set(s2.trainable) == set(ALIGNMENT_GROUPS) and s2.frozen == ("backbone",)
    assert set(s1.losses) == {"AR"} and set(s2.losses) == {"Gen", "ITC"}


def test_bad_plans_are_rejected():
    bad = [
        StagePlan(1, ("backbone",), ("downproj",), {"AR": 1.0}, 10, 8, 1e-3, 0),  # not a partition
        StagePlan(1, ("backbone",), ALIGNMENT_GROUPS, {"Gen": 1.0}, 10, 8, 1e-3, 0),
        StagePlan(2, ALIGNMENT_GROUPS, ("backbone",), {"AR": 1.0}, 10, 8, 1e-3, 0),
        StagePlan(2, ("backbone", *ALIGNMENT_GROUPS[1:]), (ALIGNMENT_GROUPS[0],), {"Gen": 1.0}, 10, 8, 1e-3, 0),
    ]
    for plan in bad:
        with pytest.raises(ConfigError):
            plan.validate()


# stage 1 -----------------------------------------------------------------------

def test_stage1_freezes_alignment_and_learns(stage1_run):
    res, out = stage1_run
    for g in ALIGNMENT_GROUPS:
        assert res.checksums_before[g] == res.checksums_after[g]
    assert res.checksums_before["backbone"] != res.checksums_after["backbone"]
    m = read_metrics(out / "metrics.jsonl")
    assert m == res.metrics
    assert [r["step"] for r in m] == sorted({r["step"] for r in m})
    assert set(m[0]) == {"step", "stage", "loss_AR", "beta", "r", "lr", "wall_ms"}
    assert m[0]["wall_ms"] is None


def test_stage1_lora_merges_before_freezing(quick, tmp_path):
    cfg = quick_config(**{"trainer.stage1_mode": '"lora"', "trainer.stage1_steps": 4})
    _, train = quick
    res = run_stage1(cfg, train, tmp_path)
    assert not any("lora_" in n for n, _ in res.model.named_parameters())
    assert res.checksums_before["backbone"] != res.checksums_after["backbone"]
    _, meta = ckpt.load(res.checkpoint)
    assert meta["lora"] is False


# stage 2 -----------------------------------------------------------------------

def test_stage2_freezes_backbone_and_logs_the_schedule(quick, stage1_run, tmp_path):
    cfg, train = quick
    model, _ = load_model(cfg, stage1_run[0].checkpoint, expect_stage=1)
    res = run_stage2(cfg, train, tmp_path, model)
    assert res.checksums_before["backbone"] == res.checksums_after["backbone"]
    for g in ALIGNMENT_GROUPS:
        assert res.checksums_before[g] != res.checksums_after[g]
    plan = stage2_plan(cfg)
    sched = stage2_schedule(cfg, plan)
    for rec in res.metrics:
        g = gen_steps_before(rec["step"] - 1, plan)
        assert rec["gen_step"] == g
        assert rec["r"] == replacement_ratio(g, sched)
        assert rec["beta"] == 1.0 - replacement_ratio(g, sched)


def test_zero_itc_weight_leaves_retrieval_head_untouched(quick, stage1_run, tmp_path):
    cfg = quick_config(**{"trainer.itc_weight": 0.0})
    _, train = quick
    model, _ = load_model(cfg, stage1_run[0].checkpoint)
    before = {n: p.clone() for n, p in model.fusion.named_parameters()}
    res = run_stage2(cfg, train, tmp_path, model)
    for n, p in res.model.fusion.named_parameters():
        assert torch.equal(p, before[n]), n
    assert all("loss_ITC" not in r for r in res.metrics)


# checkpoints -------------------------------------------------------------------

def test_resume_reproduces_the_unbroken_run(quick, tmp_path):
    _, train = quick
    cfg = quick_config(**{"trainer.checkpoint_every": 6, "trainer.log_every": 1})
    run_stage1(cfg, train, tmp_path / "full")
    run_stage1(cfg, train, tmp_path / "resumed", resume=tmp_path / "full" / "stage1-step6.obrg")
    a = read_metrics(tmp_path / "full" / "metrics.jsonl")
    b = read_metrics(tmp_path / "resumed" / "metrics.jsonl")
    assert [r for r in a if r["step"] > 6] == [r for r in b if r["step"] > 6]
    assert (tmp_path / "full" / "stage1.obrg").read_bytes() == (tmp_path / "resumed" / "stage1.obrg").read_bytes()


def test_resume_stage2(quick, stage1_run, tmp_path):
    _, train = quick
    cfg = quick_config(**{"trainer.checkpoint_every": 5, "trainer.log_every": 1})
    m1, _ = load_model(cfg, stage1_run[0].checkpoint)
    run_stage2(cfg, train, tmp_path / "full", m1)
    m2, _ = load_model(cfg, stage1_run[0].checkpoint)
    run_stage2(cfg, train, tmp_path / "resumed", m2, resume=tmp_path / "full" / "stage2-step10.obrg")
    a = read_metrics(tmp_path / "full" / "metrics.jsonl")
    b = read_metrics(tmp_path / "resumed" / "metrics.jsonl")
    assert [r for r in a if r["step"] > 10] == [r for r in b if r["step"] > 10]
    assert (tmp_path / "full" / "stage2.obrg").read_bytes() == (tmp_path / "resumed" / "stage2.obrg").read_bytes()


def test_save_load_save_is_byte_identical(stage1_run, tmp_path):
    path = stage1_run[0].checkpoint
    tensors, meta = ckpt.load(path)
    ckpt.save(tmp_path / "again.obrg", tensors, meta)
    assert (tmp_path / "again.obrg").read_bytes() == path.read_bytes()


def test_fingerprint_mismatch_is_rejected(stage1_run):
    other = quick_config(**{"seeds.root": 99})
    with pytest.raises(CompatibilityError):
        load_model(other, stage1_run[0].checkpoint)
    with pytest.raises(CompatibilityError):
        load_model(quick_config(**{"backbone.d_emb": 16}), stage1_run[0].checkpoint)


def test_wrong_stage_and_corruption(quick, stage1_run, tmp_path):
    cfg, _ = quick
    with pytest.raises(ConfigError):
        load_model(cfg, stage1_run[0].checkpoint, expect_stage=2)
    data = stage1_run[0].checkpoint.read_bytes()
    (tmp_path / "cut.obrg").write_bytes(data[: len(data) // 2])
    with pytest.raises(CorruptionError):
        ckpt.load(tmp_path / "cut.obrg")
    flipped = bytearray(data)
    flipped[len(data) // 2] ^= 0xFF
    (tmp_path / "flip.obrg").write_bytes(bytes(flipped))
    with pytest.raises(CorruptionError):
        ckpt.load(tmp_path / "flip.obrg")
    (tmp_path / "junk.obrg").write_bytes(b"NOPE" + data[4:])
    with pytest.raises(CorruptionError):
        ckpt.load(tmp_path / "junk.obrg")


def test_stage2_refuses_unmerged_adapters(quick, tmp_path):
    from obrg.backbone import adapt_low_rank
    from obrg.numerics import Rng

    cfg, train = quick
    model = build_model(cfg)
    adapt_low_rank(model, ["backbone.blocks.*.attn.*.weight"], 2, 1.0, Rng(0))
    with pytest.raises(ConfigError):
        run_stage2(cfg, train, tmp_path, model)
