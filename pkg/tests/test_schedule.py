import json

import numpy as np
import pytest
import torch

from onsetlab.dataset import HemisphereSample, make_splits, tss_labels
from onsetlab.models import EARLY_BLOCKS, Model2D, ModelConfig, build_model
from onsetlab.schedule import (
    Checkpoint,
    PhaseConfig,
    ScheduleError,
    chain_configs,
    checksum,
    load_checkpoint,
    run_phase,
    run_schema,
    transfer_weights,
)

MC = ModelConfig.desk("2d", widths=(4, 8, 8, 8))


def _cohort(n=24, seed=0):
    """Tiny hemisphere stacks: lesion halves carry a bright blob whose size tracks onset time."""
    rng = np.random.default_rng(seed)
    cases, samples = [], []
    for i in range(n):
        cid = f"c{i:03d}"
        control = i % 6 == 0
        tss = None if control else float([60, 150, 220, 400][i % 4])
        side = "none" if control else ("left" if i % 2 else "right")
        cases.append({"case_id": cid, "lesion_side": side, "tss_minutes": tss})
        for half in ("left", "right"):
            x = rng.normal(0.3, 0.05, (3, 12, 16, 12)).astype(np.float32)
            les = np.zeros((12, 16, 12), np.uint8)
            labels = {"has_lesion": 0}
            if half == side:
                r = 1 + (tss < 180) + (tss < 270)
                les[4 : 4 + r + 1, 6 : 6 + r + 1, 4:8] = 1
                x[0][les > 0] += 0.6
                labels = {"has_lesion": 1, **tss_labels(tss)}
            samples.append(HemisphereSample(x, half, half == "right", labels, cid, les))
    return make_splits({"cases": cases}, seed=seed), samples


@pytest.fixture(scope="module")
def cohort():
    return _cohort()


def _x():
    return torch.rand(2, 3, 12, 16, 12, generator=torch.Generator().manual_seed(0))


# ---------------------------------------------------------------- transfer


def _ck(model, phase="detect", label="has_lesion"):
    return Checkpoint({k: v.clone() for k, v in model.state_dict().items()}, MC.to_dict(), phase, 0, "", label_key=label)


def test_self_transfer_is_identity():
    torch.manual_seed(0)
    src = build_model(MC).eval()
    torch.manual_seed(1)
    dst, rep = transfer_weights(_ck(src), build_model(MC))
    dst.eval()
    with torch.no_grad():
        assert torch.equal(src(_x())["logit"], dst(_x())["logit"])
    assert not rep["reinitialized"] and not rep["frozen"] and not rep["skipped"]


def test_task_change_report():
    torch.manual_seed(0)
    src = build_model(MC)
    dst, rep = transfer_weights(_ck(src), build_model(MC), EARLY_BLOCKS["2d"], reinit_head=True)
    assert all(n.startswith(("head.", "aggregator.")) for n in rep["reinitialized"]) and rep["reinitialized"]
    assert all(n.startswith(EARLY_BLOCKS["2d"]) for n in rep["frozen"]) and rep["frozen"]
    assert any(n.startswith("layer4.") for n in rep["copied"])
    assert all(not p.requires_grad for n, p in dst.named_parameters() if n in rep["frozen"])


def test_disjoint_names_rejected():
    with pytest.raises(ScheduleError, match="0 parameters transferred"):
        transfer_weights({"foo.weight": torch.zeros(2)}, build_model(MC))


def test_shape_mismatch_rejected():
    other = build_model(ModelConfig.desk("2d", widths=(4, 8, 8, 16)))
    with pytest.raises(ScheduleError, match="shape mismatch"):
        transfer_weights(_ck(other), build_model(MC))


def test_unknown_freeze_prefix_rejected():
    with pytest.raises(ScheduleError, match="matches no parameter"):
        transfer_weights(_ck(build_model(MC)), build_model(MC), ["nope."])


# ---------------------------------------------------------------- configs


def test_phase_config_validation():
    assert PhaseConfig("attn").phase == "attn_finetune"
    with pytest.raises(ValueError):
        PhaseConfig("phase5")
    with pytest.raises(ValueError):
        PhaseConfig("detect", init="ssl")
    with pytest.raises(ValueError):
        PhaseConfig.from_dict({"phase": "detect", "bogus": 1})


def test_broken_chain_rejected(cohort):
    splits, samples = cohort
    with pytest.raises(ScheduleError, match="broken chain"):
        run_schema([PhaseConfig("tss270", "checkpoint", epochs=0)], splits, samples, MC)


def test_wrong_parent_phase_rejected(cohort):
    splits, samples = cohort
    ck, _, _ = run_phase(PhaseConfig("detect", epochs=0), splits, samples, MC)
    with pytest.raises(ScheduleError, match="expects a tss180"):
        run_phase(PhaseConfig("tss270", "checkpoint", epochs=0), splits, samples, MC, parent=ck)


# ---------------------------------------------------------------- phases


def test_zero_epochs_returns_initialisation(cohort):
    splits, samples = cohort
    ck, rep, info = run_phase(PhaseConfig("detect", epochs=0, seed=4), splits, samples, MC)
    torch.manual_seed(4)
    init = build_model(MC).state_dict()
    assert all(torch.equal(init[k], ck.state[k]) for k in init)
    assert 0 <= rep.roc_auc <= 1 and info["best_epoch"] == 0


def test_attn_finetune_moves_only_attention_and_head(cohort):
    splits, samples = cohort
    out = run_schema(chain_configs(seed=0, epochs=(2, 2, 2, 3)), splits, samples, MC)
    before, after = out["checkpoints"]["tss270"].state, out["checkpoints"]["attn_finetune"].state
    params = {n for n, _ in Model2D(MC).named_parameters()}
    changed = {k for k in params if not torch.equal(before[k], after[k])}
    assert changed and all(k.startswith(("gate.", "head.", "aggregator.")) for k in changed)
    # tss270 inherits the tss180 freeze map: early blocks equal the detect weights
    det = out["checkpoints"]["detect"].state
    early = [k for k in params if k.startswith(EARLY_BLOCKS["2d"])]
    assert all(torch.equal(det[k], before[k]) for k in early)


def test_frozen_checksum_stable(cohort):
    splits, samples = cohort
    det, _, _ = run_phase(PhaseConfig("detect", epochs=1), splits, samples, MC)
    ck, _, info = run_phase(PhaseConfig("tss180", "checkpoint", epochs=2), splits, samples, MC, parent=det)
    m = build_model(MC)
    m.load_state_dict(det.state)
    assert ck.frozen and info["frozen_checksum"] == checksum(m, ck.frozen)


def test_schema_outputs_and_test_set_fixed(cohort, tmp_path):
    splits, samples = cohort
    out = run_schema(chain_configs(seed=1, epochs=(1, 1, 1, 1)), splits, samples, MC, tmp_path)
    assert [r["phase"] for r in out["rows"]] == ["detect", "tss180", "tss270", "attn_finetune"]
    ids = None
    for tag in out["checkpoints"]:
        d = tmp_path / tag
        assert (d / "checkpoint.pt").exists() and (d / "curves.csv").exists()
        m = json.loads((d / "metrics.json").read_text())
        ids = ids or m["test_case_ids"]
        assert m["test_case_ids"] == ids
        assert load_checkpoint(d).phase == tag
    assert (tmp_path / "comparison.csv").read_text().count("\n") == 5


def test_replay_is_deterministic(cohort, tmp_path):
    splits, samples = cohort
    cfgs = [PhaseConfig("detect", epochs=2, seed=3), PhaseConfig("tss180", "checkpoint", epochs=2, seed=3)]
    a = run_schema(cfgs, splits, samples, MC, tmp_path / "a")["rows"]
    b = run_schema(cfgs, splits, samples, MC, tmp_path / "b")["rows"]
    assert a == b
    ma = json.loads((tmp_path / "a" / "tss180" / "metrics.json").read_text())["metrics"]
    mb = json.loads((tmp_path / "b" / "tss180" / "metrics.json").read_text())["metrics"]
    assert ma == mb


def test_best_epoch_has_best_validation(cohort):
    splits, samples = cohort
    _, _, info = run_phase(PhaseConfig("detect", epochs=6, patience=3), splits, samples, MC)
    vals = [r["val_" + info["selection_metric"]] for r in info["curves"]]
    assert info["best_val"] == max(vals) == vals[info["best_epoch"] - 1]


def test_detect_learns_blobs(cohort):
    splits, samples = cohort
    _, rep, _ = run_phase(PhaseConfig("detect", epochs=20, patience=20), splits, samples, MC)
    assert rep.roc_auc > 0.9
