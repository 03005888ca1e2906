import numpy as np
import pytest

from edvtlab.numerics import SeededRng, Tensor, matmul
from edvtlab.projector import (
    ChainingMode,
    ProjectorParams,
    VideoFeatures,
    project_frame,
    project_video,
    subsample_frame_indices,
    subsample_tokens,
)

from oracles import projector_block_oracle


def _make(seed, k=3, feat_dim=5, proj_dim=6, ffn_dim=10, model_dim=8, blocks=2):
    rng = SeededRng(seed)
    return ProjectorParams(rng, k, feat_dim, proj_dim, ffn_dim, model_dim, blocks=blocks)


def _video(seed, t=4, l=2, feat_dim=5):
    r = np.random.default_rng(seed)
    return VideoFeatures(Tensor(r.normal(size=(t, l, feat_dim))))


class TestBasics:
    def test_mode_from_name(self):
        assert ChainingMode.from_name("independent") is ChainingMode.INDEPENDENT
        assert ChainingMode.from_name(" Sequential ") is ChainingMode.SEQUENTIAL
        with pytest.raises(ValueError, match="unknown chaining mode"):
            ChainingMode.from_name("parallel")

    def test_video_features_shape_guard(self):
        with pytest.raises(ValueError, match="3-D"):
            VideoFeatures(np.zeros((4, 5)))
        v = _video(0)
        assert (v.frame_count, v.vectors_per_frame, v.feat_dim) == (4, 2, 5)
        assert len(v) == 4
        assert v.frame(1).shape == (2, 5)
        with pytest.raises(ValueError, match="out of range"):
            v.frame(4)

    def test_params_validation(self):
        rng = SeededRng(0)
        with pytest.raises(ValueError, match=">= 1"):
            ProjectorParams(rng, 0, 5, 6, 10, 8)
        with pytest.raises(ValueError, match="at least one block"):
            ProjectorParams(SeededRng(0), 3, 5, 6, 10, 8, blocks=0)

    def test_named_tensors_cover_all_blocks(self):
        params = _make(7, blocks=3)
        named = params.named_tensors()
        assert "p" in named and "out_map" in named
        # 13 tensors per block plus the bank and the output map
        assert len(named) == 2 + 3 * 13
        assert named["blocks.2.ffn_w2"] is params.blocks[2].ffn_w2

    def test_set_tensor_shape_and_name_guards(self):
        params = _make(7)
        with pytest.raises(ValueError, match="shape mismatch"):
            params.set_tensor("p", Tensor.zeros((1, 1)))
        with pytest.raises(KeyError):
            params.set_tensor("blocks.0.nope", Tensor.zeros((1, 1)))
        fresh = Tensor.zeros(params.blocks[1].self_wq.shape)
        params.set_tensor("blocks.1.self_wq", fresh)
        assert params.blocks[1].self_wq is fresh

    def test_load_named_roundtrip_and_missing(self):
        src = _make(11)
        dst = _make(12)
        dst.load_named(src.named_tensors())
        for name, t in src.named_tensors().items():
            assert dst.named_tensors()[name].array.tobytes() == t.array.tobytes()
        partial = dict(src.named_tensors())
        del partial["blocks.0.g_ffn"]
        with pytest.raises(KeyError, match="missing projector tensor"):
            _make(13).load_named(partial)


class TestProjectFrame:
    def test_output_shape(self):
        params = _make(3)
        v = _video(3)
        out = project_frame(params, v.frame(0), params.p)
        assert out.shape == (3, 6)

    def test_input_validation(self):
        params = _make(3)
        v = _video(3)
        with pytest.raises(ValueError, match="frame must be"):
            project_frame(params, Tensor.zeros((2, 4)), params.p)
        with pytest.raises(ValueError, match="x_prev must be"):
            project_frame(params, v.frame(0), Tensor.zeros((2, 6)))

    def test_matches_block_oracle(self):
        # project_frame applies every block; the oracle does one at a time.
        for seed in (0, 1, 2):
            params = _make(seed, blocks=3)
            v = _video(seed + 50)
            frame = v.frame(0)
            got = project_frame(params, frame, params.p)
            want = params.p.array.copy()
            for blk in params.blocks:
                want = projector_block_oracle(blk, want, frame.array, params.norm_eps)
            assert np.max(np.abs(got.array - want)) <= 1e-12

    def test_depends_on_x_prev(self):
        params = _make(5)
        v = _video(5)
        a = project_frame(params, v.frame(0), params.p)
        other = Tensor(params.p.array + 0.3)
        b = project_frame(params, v.frame(0), other)
        assert not np.allclose(a.array, b.array)


class TestSubsampling:
    def test_independent_grid_starts_at_zero(self):
        assert subsample_frame_indices(7, 2, "independent") == [0, 2, 4, 6]
        assert subsample_frame_indices(8, 3, "independent") == [0, 3, 6]

    def test_sequential_grid_ends_at_last(self):
        assert subsample_frame_indices(7, 2, "sequential") == [0, 2, 4, 6]
        assert subsample_frame_indices(8, 3, "sequential") == [1, 4, 7]
        for t in range(1, 12):
            for s in range(1, 6):
                idx = subsample_frame_indices(t, s, "sequential")
                assert idx[-1] == t - 1
                assert all(b - a == s for a, b in zip(idx, idx[1:]))

    def test_stride_one_keeps_everything(self):
        for mode in ("independent", "sequential"):
            assert subsample_frame_indices(5, 1, mode) == [0, 1, 2, 3, 4]

    def test_single_frame_any_stride(self):
        for mode in ("independent", "sequential"):
            assert subsample_frame_indices(1, 4, mode) == [0]

    def test_stride_larger_than_count(self):
        assert subsample_frame_indices(3, 10, "independent") == [0]
        assert subsample_frame_indices(3, 10, "sequential") == [2]

    def test_validation(self):
        with pytest.raises(ValueError, match="frame_count"):
            subsample_frame_indices(0, 1, "independent")
        with pytest.raises(ValueError, match="stride"):
            subsample_frame_indices(4, 0, "independent")

    def test_subsample_tokens_selects_rows(self):
        v = _video(9, t=6)
        kept, idx = subsample_tokens(v.tensor, 2, "sequential")
        assert idx == [1, 3, 5]
        assert kept.array.tobytes() == np.ascontiguousarray(v.tensor.array[idx]).tobytes()
        with pytest.raises(ValueError, match="3-D"):
            subsample_tokens(Tensor.zeros((4, 5)), 2, "sequential")


class TestProjectVideo:
    def test_shapes_both_modes(self):
        params = _make(1)
        v = _video(1, t=5)
        for mode in ("independent", "sequential"):
            out = project_video(params, v, mode)
            assert out.shape == (5, 3, 8)

    def test_feat_dim_mismatch(self):
        params = _make(1)
        with pytest.raises(ValueError, match="feat_dim"):
            project_video(params, _video(1, feat_dim=6), "independent")

    def test_accepts_raw_array(self):
        params = _make(1)
        v = _video(1)
        a = project_video(params, v, "independent")
        b = project_video(params, v.tensor.array, "independent")
        assert a.array.tobytes() == b.array.tobytes()

    def test_independent_equals_per_frame_chain(self):
        params = _make(2)
        v = _video(2, t=4)
        out = project_video(params, v, ChainingMode.INDEPENDENT)
        for i in range(4):
            state = project_frame(params, v.frame(i), params.p)
            want = matmul(state, params.out_map)
            assert out.array[i].tobytes() == want.array.tobytes()

    def test_sequential_equals_chained_states(self):
        params = _make(2)
        v = _video(2, t=4)
        out = project_video(params, v, ChainingMode.SEQUENTIAL)
        state = params.p
        for i in range(4):
            state = project_frame(params, v.frame(i), state)
            want = matmul(state, params.out_map)
            assert out.array[i].tobytes() == want.array.tobytes()

    def test_independent_frame_locality(self):
        # Perturbing frame j only moves frame j's tokens.
        params = _make(4)
        base = _video(4, t=4)
        out0 = project_video(params, base, "independent")
        bumped = base.tensor.array.copy()
        bumped[2] += 1.0
        out1 = project_video(params, VideoFeatures(Tensor(bumped)), "independent")
        for i in range(4):
            same = out0.array[i].tobytes() == out1.array[i].tobytes()
            assert same == (i != 2)

    def test_sequential_prefix_stability(self):
        # Appending frames never changes the tokens already emitted.
        params = _make(4)
        full = _video(4, t=6)
        out_full = project_video(params, full, "sequential")
        for t in range(1, 6):
            prefix = VideoFeatures(Tensor(full.tensor.array[:t].copy()))
            out_prefix = project_video(params, prefix, "sequential")
            assert out_prefix.array.tobytes() == out_full.array[:t].tobytes()

    def test_sequential_perturbation_propagates_forward_only(self):
        params = _make(4)
        base = _video(4, t=5)
        out0 = project_video(params, base, "sequential")
        bumped = base.tensor.array.copy()
        bumped[2] += 1.0
        out1 = project_video(params, VideoFeatures(Tensor(bumped)), "sequential")
        for i in range(5):
            same = out0.array[i].tobytes() == out1.array[i].tobytes()
            assert same == (i < 2)

    def test_single_frame_modes_agree_bitwise(self):
        # With one frame both chains start from the bank, so they coincide.
        params = _make(6)
        v = _video(6, t=1)
        a = project_video(params, v, "independent")
        b = project_video(params, v, "sequential")
        assert a.array.tobytes() == b.array.tobytes()

    def test_stride_matches_manual_subsample(self):
        params = _make(8)
        v = _video(8, t=7)
        for mode in ("independent", "sequential"):
            out = project_video(params, v, mode, stride=3)
            idx = subsample_frame_indices(7, 3, mode)
            assert out.shape == (len(idx), 3, 8)
            kept = VideoFeatures(Tensor(np.ascontiguousarray(v.tensor.array[idx])))
            want = project_video(params, kept, mode)
            assert out.array.tobytes() == want.array.tobytes()
