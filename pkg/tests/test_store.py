import numpy as np
import pytest

from segtriage.referral import ThresholdConfig
from segtriage.store import (
    CaseStore,
    DuplicateCaseError,
    StateError,
    StoreError,
    UnknownCaseError,
)
from segtriage.uncertainty import METRICS


def make_image(seed=0, size=8):
    rng = np.random.default_rng(seed)
    return rng.random((1, size, size), dtype=np.float32)


def make_mask(seed=0, size=8):
    rng = np.random.default_rng(seed + 1000)
    return (rng.random((size, size)) > 0.6).astype(np.int64)


def fake_infer(store, case_id, normalized, decision, size=8, seed=0):
    """Record an inference event without running a model."""
    rng = np.random.default_rng(seed)
    arrays = {
        "stack": rng.random((3, 2, size, size), dtype=np.float32),
        "prob_fg": rng.random((size, size), dtype=np.float32),
        "pred_mask": (rng.random((size, size)) > 0.5).astype(np.float32),
        **{f"map_{m}": rng.random((size, size), dtype=np.float32) * 0.1 for m in METRICS},
    }
    return store.record_inference(
        case_id,
        scores={m: 0.1 for m in METRICS},
        normalized_score=normalized,
        decision=decision,
        infer_params={"T": 3, "seed": seed, "dropout_p": 0.25},
        decision_config={"metric": "epistemic", "reduction": "mean",
                         "tau": 0.6, "normalization": "theoretical-max"},
        arrays=arrays,
    )


# ---------------------------------------------------------------------------
# ingestion


def test_ingest_persists_image_bit_exact(tmp_path):
    store = CaseStore(tmp_path)
    img = make_image(1)
    case = store.ingest(img, case_id="c1")
    assert case.status == "ingested"
    assert not case.has_gt
    np.testing.assert_array_equal(store.load_artifact("c1", "image"), img)


def test_ingest_with_gt_mask(tmp_path):
    store = CaseStore(tmp_path)
    gt = make_mask(2)
    case = store.ingest(make_image(2), gt_mask=gt, case_id="c1")
    assert case.has_gt
    np.testing.assert_array_equal(store.load_artifact("c1", "gt_mask"), gt.astype(np.float32))


def test_ingest_duplicate_id_rejected(tmp_path):
    store = CaseStore(tmp_path)
    store.ingest(make_image(1), case_id="c1")
    with pytest.raises(DuplicateCaseError):
        store.ingest(make_image(2), case_id="c1")


def test_ingest_validation(tmp_path):
    store = CaseStore(tmp_path)
    with pytest.raises(ValueError):
        store.ingest(np.zeros((8, 8), dtype=np.float32))
    with pytest.raises(ValueError):
        store.ingest(np.full((1, 8, 8), 1.5, dtype=np.float32))
    with pytest.raises(ValueError):
        store.ingest(make_image(1), gt_mask=np.zeros((4, 4), dtype=np.int64))
    with pytest.raises(ValueError):
        store.ingest(make_image(1), gt_mask=np.full((8, 8), 2, dtype=np.int64))


def test_auto_ids_are_sequential_and_skip_collisions(tmp_path):
    store = CaseStore(tmp_path)
    first = store.ingest(make_image(1))
    assert first.case_id == "case-00001"
    store.ingest(make_image(2), case_id="case-00002")
    third = store.ingest(make_image(3))
    assert third.case_id == "case-00003"


# ---------------------------------------------------------------------------
# inference events


def test_inference_updates_case(tmp_path):
    store = CaseStore(tmp_path)
    store.ingest(make_image(1), case_id="c1")
    case = fake_infer(store, "c1", 0.7, "referred")
    assert case.status == "referred"
    assert case.normalized_score == 0.7
    assert set(case.scores) == set(METRICS)
    assert "prob_fg" in case.artifacts
    assert "map_entropy" in case.artifacts


def test_inference_unknown_case(tmp_path):
    store = CaseStore(tmp_path)
    with pytest.raises(UnknownCaseError):
        fake_infer(store, "nope", 0.5, "retained")


def test_inference_validation(tmp_path):
    store = CaseStore(tmp_path)
    store.ingest(make_image(1), case_id="c1")
    with pytest.raises(ValueError):
        fake_infer(store, "c1", 0.5, "flagged")
    with pytest.raises(ValueError):
        store.record_inference("c1", scores={"entropy": 0.1}, normalized_score=0.5,
                               decision="retained", infer_params={}, decision_config={},
                               arrays={})


def test_reinference_replaces_scores_and_keeps_old_artifacts(tmp_path):
    store = CaseStore(tmp_path)
    store.ingest(make_image(1), case_id="c1")
    fake_infer(store, "c1", 0.3, "retained", seed=1)
    first_ref = store.get("c1").artifacts["prob_fg"]
    case = fake_infer(store, "c1", 0.8, "referred", seed=2)
    second_ref = case.artifacts["prob_fg"]
    assert case.status == "referred"
    assert case.normalized_score == 0.8
    assert first_ref != second_ref
    # old version stays on disk so historical log lines stay resolvable
    assert (tmp_path / "artifacts" / first_ref).exists()


def test_inference_rejected_after_review(tmp_path):
    store = CaseStore(tmp_path)
    store.ingest(make_image(1), case_id="c1")
    fake_infer(store, "c1", 0.9, "referred")
    store.record_verdict("c1", "accept")
    with pytest.raises(StateError):
        fake_infer(store, "c1", 0.2, "retained")


# ---------------------------------------------------------------------------
# verdicts


def test_accept_verdict_transitions_to_reviewed(tmp_path):
    store = CaseStore(tmp_path)
    store.ingest(make_image(1), case_id="c1")
    fake_infer(store, "c1", 0.9, "referred")
    case, applied = store.record_verdict("c1", "accept", reviewer="alice")
    assert applied
    assert case.status == "reviewed"
    assert case.verdict == {"verdict": "accept", "reviewer": "alice"}


def test_override_verdict_stores_mask(tmp_path):
    store = CaseStore(tmp_path)
    store.ingest(make_image(1), case_id="c1")
    fake_infer(store, "c1", 0.9, "referred")
    mask = make_mask(5)
    case, applied = store.record_verdict("c1", "override", corrected_mask=mask)
    assert applied
    np.testing.assert_array_equal(store.load_artifact("c1", "review_mask"),
                                  mask.astype(np.float32))


def test_verdict_requires_referred_status(tmp_path):
    store = CaseStore(tmp_path)
    store.ingest(make_image(1), case_id="c1")
    with pytest.raises(StateError):
        store.record_verdict("c1", "accept")
    fake_infer(store, "c1", 0.1, "retained")
    with pytest.raises(StateError):
        store.record_verdict("c1", "accept")
    with pytest.raises(UnknownCaseError):
        store.record_verdict("ghost", "accept")


def test_verdict_validation(tmp_path):
    store = CaseStore(tmp_path)
    store.ingest(make_image(1), case_id="c1")
    fake_infer(store, "c1", 0.9, "referred")
    with pytest.raises(ValueError):
        store.record_verdict("c1", "maybe")
    with pytest.raises(ValueError):
        store.record_verdict("c1", "override")
    with pytest.raises(ValueError):
        store.record_verdict("c1", "accept", corrected_mask=make_mask(1))
    with pytest.raises(ValueError):
        store.record_verdict("c1", "override", corrected_mask=np.zeros((3, 3), dtype=np.int64))
    with pytest.raises(ValueError):
        store.record_verdict("c1", "override",
                             corrected_mask=np.full((8, 8), 2, dtype=np.int64))
    assert store.get("c1").status == "referred"


def test_identical_verdict_resubmission_is_a_noop(tmp_path):
    store = CaseStore(tmp_path)
    store.ingest(make_image(1), case_id="c1")
    fake_infer(store, "c1", 0.9, "referred")
    mask = make_mask(5)
    store.record_verdict("c1", "override", reviewer="alice", corrected_mask=mask)
    digest = store.digest()
    case, applied = store.record_verdict("c1", "override", reviewer="alice",
                                         corrected_mask=mask)
    assert not applied
    assert case.status == "reviewed"
    assert store.digest() == digest  # no new event appended


def test_conflicting_verdict_rejected(tmp_path):
    store = CaseStore(tmp_path)
    store.ingest(make_image(1), case_id="c1")
    fake_infer(store, "c1", 0.9, "referred")
    store.record_verdict("c1", "accept", reviewer="alice")
    with pytest.raises(StateError):
        store.record_verdict("c1", "override", reviewer="alice",
                             corrected_mask=make_mask(5))
    with pytest.raises(StateError):
        store.record_verdict("c1", "accept", reviewer="bob")


# ---------------------------------------------------------------------------
# queue ordering


def test_queue_orders_by_score_then_id(tmp_path):
    store = CaseStore(tmp_path)
    for cid, norm in [("b", 0.5), ("a", 0.5), ("c", 0.9), ("d", 0.1)]:
        store.ingest(make_image(ord(cid)), case_id=cid)
        fake_infer(store, cid, norm, "referred")
    assert [c.case_id for c in store.queue("referred")] == ["c", "a", "b", "d"]


def test_queue_filters_by_status(tmp_path):
    store = CaseStore(tmp_path)
    store.ingest(make_image(1), case_id="c1")
    store.ingest(make_image(2), case_id="c2")
    fake_infer(store, "c1", 0.9, "referred")
    fake_infer(store, "c2", 0.1, "retained")
    assert [c.case_id for c in store.queue("referred")] == ["c1"]
    assert [c.case_id for c in store.queue("retained")] == ["c2"]
    assert store.queue("reviewed") == []


# ---------------------------------------------------------------------------
# config events


def test_set_config_updates_active(tmp_path):
    store = CaseStore(tmp_path)
    assert store.active_config == ThresholdConfig()
    cfg = ThresholdConfig(metric="entropy", tau=0.3)
    store.set_config(cfg)
    assert store.active_config == cfg


# ---------------------------------------------------------------------------
# replay determinism


def run_mixed_sequence(store, rng):
    ids = []
    for i in range(12):
        roll = rng.random()
        if roll < 0.4 or not ids:
            cid = f"case-{rng.integers(0, 10 ** 6):06d}"
            if cid not in store:
                store.ingest(make_image(int(rng.integers(0, 2 ** 31))), case_id=cid)
                ids.append(cid)
        elif roll < 0.75:
            cid = ids[int(rng.integers(0, len(ids)))]
            if store.get(cid).status != "reviewed":
                norm = float(rng.random())
                fake_infer(store, cid, norm, "referred" if norm > 0.6 else "retained",
                           seed=int(rng.integers(0, 2 ** 31)))
        elif roll < 0.9:
            cid = ids[int(rng.integers(0, len(ids)))]
            if store.get(cid).status == "referred":
                store.record_verdict(cid, "accept", reviewer="r1")
        else:
            store.set_config(ThresholdConfig(tau=round(float(rng.random()), 2)))


def test_replay_reproduces_state_after_mixed_sequence(tmp_path):
    rng = np.random.default_rng(7)
    store = CaseStore(tmp_path)
    run_mixed_sequence(store, rng)
    replayed = CaseStore(tmp_path)
    assert replayed.snapshot() == store.snapshot()
    assert replayed.active_config == store.active_config
    assert [c.case_id for c in replayed.queue("referred")] == \
        [c.case_id for c in store.queue("referred")]
    for case in store.cases():
        for name in case.artifacts:
            np.testing.assert_array_equal(
                replayed.load_artifact(case.case_id, name),
                store.load_artifact(case.case_id, name))


def test_reads_do_not_touch_the_log(tmp_path):
    store = CaseStore(tmp_path)
    store.ingest(make_image(1), case_id="c1")
    fake_infer(store, "c1", 0.9, "referred")
    digest = store.digest()
    store.snapshot()
    store.queue("referred")
    store.cases()
    store.load_artifact("c1", "prob_fg")
    assert store.digest() == digest


def test_corrupt_sequence_number_detected(tmp_path):
    store = CaseStore(tmp_path)
    store.ingest(make_image(1), case_id="c1")
    log = tmp_path / "events.jsonl"
    line = log.read_text()
    log.write_text(line + line)  # duplicate seq 0
    with pytest.raises(StoreError, match="seq"):
        CaseStore(tmp_path)


def test_load_artifact_unknown_name(tmp_path):
    store = CaseStore(tmp_path)
    store.ingest(make_image(1), case_id="c1")
    with pytest.raises(StoreError):
        store.load_artifact("c1", "prob_fg")
    with pytest.raises(UnknownCaseError):
        store.load_artifact("ghost", "image")
