import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from panoptrack.core import sequence_tracks, translate_mask
from panoptrack.exceptions import MalformedInputError
from panoptrack.metrics import compute_sq, count_id_switches, evaluate_sequence
from panoptrack.sim import (
    RNG_ALGORITHM,
    SimConfig,
    drop_detections,
    generate_sequence,
    make_rng,
    perturb_ids,
    perturb_masks,
    sim_detections,
    synth_embeddings,
)

from conftest import CAR, ROAD, pmap, seq

seeds = st.integers(0, 2**31 - 1)


def square_seq(table, n_frames=3, size=3, width=9):
    frames = []
    for t in range(n_frames):
        c = np.full((width, width), ROAD)
        i = np.zeros((width, width), int)
        c[2:2 + size, t:t + size] = CAR
        i[2:2 + size, t:t + size] = 1
        frames.append(pmap(c, i))
    return seq(table, *frames)


class TestGenerate:
    def test_deterministic(self):
        cfg = SimConfig(seed=17, occlusion_prob=0.2)
        assert generate_sequence(cfg) == generate_sequence(cfg)

    def test_seed_matters(self):
        assert generate_sequence(SimConfig(seed=1)) != generate_sequence(SimConfig(seed=2))

    def test_metadata(self):
        out = generate_sequence(SimConfig(seed=5))
        assert out.metadata["rng"] == RNG_ALGORITHM and out.metadata["seed"] == 5
        assert out.metadata["config"]["width"] == 128

    def test_single_frame(self):
        out = generate_sequence(SimConfig(seed=3, frames=1))
        assert len(out.gt.frames) == 1 and out.offsets == {}

    @settings(max_examples=20, deadline=None)
    @given(seeds, st.floats(0.0, 0.5))
    def test_offsets_translate_amodal_masks(self, seed, occ):
        out = generate_sequence(SimConfig(seed=seed, occlusion_prob=occ))
        for (iid, t), (dx, dy) in out.offsets.items():
            # the offset is measured since the object was last visible
            tr = next(tr for tr in out.gt_tracks if tr.track_id == iid)
            last = max(s for s in tr.frames if s < t)
            np.testing.assert_array_equal(translate_mask(out.amodal[iid, last], dx, dy), out.amodal[iid, t])

    @settings(max_examples=20, deadline=None)
    @given(seeds)
    def test_visible_masks_within_amodal(self, seed):
        out = generate_sequence(SimConfig(seed=seed, occlusion_prob=0.1))
        for tr in out.gt_tracks:
            for t, m in tr.masks.items():
                assert not (m & ~out.amodal[tr.track_id, t]).any()
                assert m.sum() >= out.config.min_visible_area

    @settings(max_examples=10, deadline=None)
    @given(seeds)
    def test_embeddings_separated(self, seed):
        out = generate_sequence(SimConfig(seed=seed, max_objects=6))
        vecs = list(out.embeddings.values())
        for a in range(len(vecs)):
            assert np.linalg.norm(vecs[a]) == pytest.approx(1.0)
            for b in range(a):
                assert vecs[a] @ vecs[b] <= 0.4

    def test_infeasible_config(self):
        with pytest.raises(MalformedInputError):
            SimConfig(width=10, height=10, max_size=20)
        with pytest.raises(MalformedInputError):
            SimConfig.from_dict({"colour": "red"})
        with pytest.raises(MalformedInputError):
            generate_sequence(SimConfig(min_objects=6, embedding_dim=2, max_embedding_similarity=-0.9))

    def test_rng_streams_independent(self):
        a = make_rng(1, 0).random(4)
        assert not np.array_equal(a, make_rng(1, 1).random(4))
        np.testing.assert_array_equal(a, make_rng(1, 0).random(4))


class TestPerturbIds:
    def test_zero_is_identity(self):
        gt = generate_sequence(SimConfig(seed=2)).gt
        assert perturb_ids(gt, 0, seed=1) == gt

    def test_single_switch(self, table):
        gt = square_seq(table)
        pred = perturb_ids(gt, 1, seed=0)
        ids, n = count_id_switches(sequence_tracks(gt)[0], pred)
        assert (ids, n) == (1, 2)

    def test_too_many(self, table):
        with pytest.raises(MalformedInputError):
            perturb_ids(square_seq(table), 3, seed=0)

    @settings(max_examples=10, deadline=None)
    @given(seeds, st.integers(1, 5))
    def test_geometry_untouched(self, seed, k):
        gt = generate_sequence(SimConfig(seed=seed, min_objects=3)).gt
        pred = perturb_ids(gt, k, seed=seed)
        for a, b in zip(gt.frames, pred.frames):
            np.testing.assert_array_equal(a.class_of, b.class_of)
            np.testing.assert_array_equal(a.instance_of > 0, b.instance_of > 0)
        assert sum(count_id_switches(tr, pred)[0] for tr in sequence_tracks(gt)) == k


class TestPerturbMasks:
    def test_zero_is_identity(self, table):
        gt = square_seq(table)
        assert perturb_masks(gt, 0) == gt

    def test_square_erodes_to_point(self, table):
        gt = square_seq(table, n_frames=1)
        out = perturb_masks(gt, 1)
        assert int((out.frames[0].instance_of > 0).sum()) == 1
        assert set(np.unique(out.frames[0].class_of)) == {ROAD, CAR}

    def test_sq_drops(self):
        gt = generate_sequence(SimConfig(seed=8)).gt
        sqs = [compute_sq(gt, perturb_masks(gt, e)).mean for e in range(3)]
        assert sqs[0] == 1.0 and sqs[0] > sqs[1] > sqs[2]


class TestDrop:
    def test_rates(self):
        gt = generate_sequence(SimConfig(seed=8)).gt
        assert drop_detections(gt, 0.0, 1) == gt
        assert all(not f.instance_of.any() for f in drop_detections(gt, 1.0, 1).frames)

    def test_dropped_middle_frame_counts_two_switches(self, table):
        gt = square_seq(table)
        pred = drop_detections(seq(table, gt.frames[1]), 1.0, 0).frames[0]
        broken = seq(table, gt.frames[0], pred, gt.frames[2])
        assert count_id_switches(sequence_tracks(gt)[0], broken) == (2, 2)


class TestDetections:
    def test_noise_free_embeddings(self):
        out = generate_sequence(SimConfig(seed=4))
        emb = synth_embeddings(out, 0.0, 0)
        for (iid, _), v in emb.items():
            np.testing.assert_array_equal(v, out.embeddings[iid])

    def test_noisy_embeddings_unit(self):
        out = generate_sequence(SimConfig(seed=4))
        for v in synth_embeddings(out, 0.3, 0).values():
            assert np.linalg.norm(v) == pytest.approx(1.0)

    def test_records_mirror_gt(self):
        out = generate_sequence(SimConfig(seed=6))
        dets = sim_detections(out)
        for t, frame_dets in enumerate(dets):
            visible = [tr for tr in out.gt_tracks if t in tr.masks]
            assert len(frame_dets) == len(visible)
            for det, tr in zip(frame_dets, visible):
                np.testing.assert_array_equal(det.mask, tr.masks[t])
                if det.propagated_from is not None:
                    assert dets[t - 1][det.propagated_from].class_id == det.class_id

    def test_offset_modes(self):
        out = generate_sequence(SimConfig(seed=6))
        assert all(d.offset is None for fr in sim_detections(out, offsets=False) for d in fr)
        assert all(d.offset == (0, 0) for fr in sim_detections(out, offsets="zero") for d in fr)
        assert all(d.propagated_mask is None for fr in sim_detections(out, propagated=False) for d in fr)

    def test_gt_vs_gt_perfect(self):
        gt = generate_sequence(SimConfig(seed=11)).gt
        assert evaluate_sequence(gt, gt).pat == 1.0
