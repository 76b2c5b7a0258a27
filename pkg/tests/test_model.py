import numpy as np
import pytest

from densepcr import tensor as T
from densepcr.model import (DensePCRModel, ModelConfig, count_params, decode_sparse, dense_reconstruct,
                            direct_fc_decoder_params, encode_image, forward_pyramid, global_features,
                            local_features)
from densepcr.selftest import end_to_end_check

from conftest import small_config


@pytest.fixture(scope="module")
def desk():
    return DensePCRModel.init(ModelConfig.desk(), 0)


@pytest.fixture(scope="module")
def paper():
    return DensePCRModel.init(ModelConfig.paper(), 0)


def zeroed(model):
    m = model.copy()
    for t in m.params.values():
        t.data[...] = 0.0
    return m


def test_paper_preset_dimensions(paper):
    cfg = paper.cfg
    assert len(cfg.encoder_channels) == 16 and cfg.latent_dim == 512
    assert cfg.decoder_hidden == (256, 256) and cfg.resolutions() == (1024, 4096, 16384)
    assert cfg.n_g == 64 and cfg.n_l == 64 and cfg.aggregated_width == 132
    assert cfg.ball_radius == (0.1, 0.05)
    np.testing.assert_allclose(cfg.grid_codes, [-0.1, -0.1 / 3, 0.1 / 3, 0.1], rtol=1e-15)


def test_encode_image(desk, rng):
    img = rng.random((3, 32, 32))
    a, b = encode_image(img, desk).data, encode_image(img, desk).data
    assert a.shape == (1, 512) and np.array_equal(a, b)
    assert np.all(encode_image(np.zeros((3, 32, 32)), zeroed(desk)).data == 0)
    with pytest.raises(ValueError, match="32"):
        encode_image(rng.random((3, 16, 16)), desk)


def test_decode_sparse_shapes(desk, paper):
    assert decode_sparse(T.Tensor(np.zeros((1, 512))), desk).shape == (256, 3)
    assert decode_sparse(T.Tensor(np.zeros((1, 512))), paper).shape == (1024, 3)


def test_decode_sparse_zero_weights_put_points_at_bias(desk, rng):
    m = zeroed(desk)
    m["sparse_decoder.fc.2.b"].data[...] = np.tile([0.1, -0.2, 0.3], 256)
    out = decode_sparse(T.Tensor(rng.normal(size=(1, 512))), m).data
    assert np.all(out == np.array([0.1, -0.2, 0.3]))


def test_global_features(desk, rng):
    pc = rng.normal(size=(40, 3)) * 0.3
    g = global_features(T.Tensor(pc), desk, 2).data
    assert g.shape == (1, 64)
    assert np.array_equal(g, global_features(T.Tensor(pc[rng.permutation(40)]), desk, 2).data)
    one = pc[:1]
    single = global_features(T.Tensor(one), desk, 2).data
    h = one
    for i in range(3):
        h = np.maximum(h @ desk[f"dense_stage2.global.{i}.w"].data + desk[f"dense_stage2.global.{i}.b"].data, 0)
    np.testing.assert_allclose(single, h, rtol=1e-14)


def test_local_features(desk, rng):
    pc = rng.normal(size=(60, 3)) * 0.2
    xl = local_features(T.Tensor(pc), desk, 2).data
    assert xl.shape == (60, 64)
    shifted = local_features(T.Tensor(pc + np.array([3.0, -1.0, 0.5])), desk, 2).data
    np.testing.assert_allclose(shifted, xl, rtol=0, atol=1e-12)
    iso = np.vstack([pc, [[40.0, 40.0, 40.0]]])
    last = local_features(T.Tensor(iso), desk, 2).data[-1]
    h = np.zeros((1, 3))
    for i in range(3):
        h = np.maximum(h @ desk[f"dense_stage2.local.{i}.w"].data + desk[f"dense_stage2.local.{i}.b"].data, 0)
    np.testing.assert_allclose(last, h[0], rtol=1e-14)


def test_dense_reconstruct_ladder_and_width(paper, rng):
    pc = rng.random((1024, 3)) - 0.5
    out, bundle = dense_reconstruct(pc, paper, 2, return_features=True)
    assert out.shape == (4096, 3) and bundle.aggregated.shape == (4096, 132)
    assert dense_reconstruct(out, paper, 3).shape == (16384, 3)
    agg = bundle.aggregated.reshape(1024, 4, 132)
    assert np.all(agg[:, :, :-1] == agg[:, :1, :-1])  # siblings differ only in the code column
    assert np.all(agg[:, :, -1] == paper.cfg.grid_codes)


def test_zero_heads_copy_parents(desk, rng):
    pc = rng.random((256, 3)) - 0.5
    out = dense_reconstruct(pc, desk.zero_heads(), 2).data
    assert np.array_equal(out, np.repeat(pc, 4, axis=0))


def test_children_distinct_at_init(desk, rng):
    pc = rng.random((256, 3)) - 0.5
    kids = dense_reconstruct(pc, desk, 2).data.reshape(256, 4, 3)
    d = np.linalg.norm(kids[:, :, None] - kids[:, None], axis=-1)
    assert d[:, np.triu_indices(4, 1)[0], np.triu_indices(4, 1)[1]].min() > 0


def test_permuting_parents_permutes_children(desk, rng):
    pc = rng.random((256, 3)) - 0.5
    perm = rng.permutation(256)
    a = dense_reconstruct(pc, desk, 2).data.reshape(256, 4, 3)
    b = dense_reconstruct(pc[perm], desk, 2).data.reshape(256, 4, 3)
    np.testing.assert_allclose(b, a[perm], rtol=0, atol=1e-12)


def test_forward_pyramid_shapes_and_determinism(desk, rng):
    img = rng.random((3, 32, 32))
    a = forward_pyramid(img, desk)
    assert [p.shape for p in a] == [(256, 3), (1024, 3), (4096, 3)]
    b = forward_pyramid(img, DensePCRModel.init(ModelConfig.desk(), 0))
    assert all(np.array_equal(p.data, q.data) for p, q in zip(a, b))


def test_count_params(desk, paper):
    assert count_params(desk, "dense_stage2") == count_params(desk, "dense_stage3")
    assert count_params(desk, "dense_stage2") == count_params(paper, "dense_stage2")
    assert sum(count_params(desk, s) for s in ("encoder", "sparse_decoder", "dense_stage2",
                                                "dense_stage3")) == count_params(desk, "total")
    pyramid = sum(count_params(paper, s) for s in ("sparse_decoder", "dense_stage2", "dense_stage3"))
    assert 3 * pyramid <= direct_fc_decoder_params(512, (256, 256), 16384)
    with pytest.raises(ValueError):
        count_params(desk, "decoder")


def test_direct_fc_count_by_hand():
    assert direct_fc_decoder_params(512, (256, 256), 16384) == (
        512 * 256 + 256 + 256 * 256 + 256 + 256 * 16384 * 3 + 16384 * 3)


def test_no_parameter_aliasing(desk):
    ids = [id(t.data) for t in desk.params.values()]
    assert len(set(ids)) == len(ids)


def test_config_round_trip():
    cfg = ModelConfig.paper()
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg and cfg.hash() != ModelConfig.desk().hash()


def test_end_to_end_finite_differences_four_point_model(rng):
    cfg = small_config(base_n=4, ball_radius=(0.6, 0.4), ball_cap=4)
    err, checked, skipped = end_to_end_check(cfg, rng, per_tensor=6, seed=2)
    assert checked >= 3 * skipped and err < 1e-4
