import numpy as np
import pytest

from hmid import engine as E
from hmid import lorentz as L
from hmid.data import build_corpus, tokenize_batch
from hmid.encoders import (CheckpointError, EncoderConfig, encode_image, encode_text,
                           init_params, load_checkpoint, project_to_hyperbolic,
                           read_checkpoint_header, save_checkpoint)
from hmid.engine import ShapeError
from hmid.masking import PatchSequence, patchify, random_mask


@pytest.fixture(scope="module")
def params():
    return init_params(EncoderConfig(), seed=3, dtype=np.float64)


@pytest.fixture(scope="module")
def corpus():
    return build_corpus(16, 0)


def test_output_shapes(params, corpus):
    seq = random_mask(patchify(corpus.images, 8), 0.5, 0)
    assert encode_image(params, seq).shape == (16, 64)
    assert encode_text(params, tokenize_batch(corpus.specific, 16)).shape == (16, 64)


def test_permuting_kept_tokens_is_invariant(params, corpus):
    seq = random_mask(patchify(corpus.images[:4], 8), 0.5, 1)
    perm = np.random.default_rng(0).permutation(seq.num_kept)
    shuffled = PatchSequence(seq.tokens[:, perm], seq.kept_indices[:, perm], seq.grid, 8, 0.5)
    a = E.as_array(encode_image(params, seq))
    b = E.as_array(encode_image(params, shuffled))
    np.testing.assert_allclose(a, b, atol=1e-5)


def test_zero_weights_give_zero_embedding(corpus):
    p = init_params(EncoderConfig(), seed=0)
    for t in p.tensors.values():
        t.data = np.zeros_like(t.data)
    assert np.all(E.as_array(encode_image(p, patchify(corpus.images[:2], 8))) == 0)
    assert np.all(E.as_array(encode_text(p, tokenize_batch(corpus.specific[:2], 16))) == 0)


def test_identical_captions_identical_embeddings(params):
    ids = tokenize_batch(["rca1 gsb2", "rca1 gsb2"], 16)
    out = E.as_array(encode_text(params, ids))
    np.testing.assert_array_equal(out[0], out[1])


def test_padding_after_eos_is_ignored(params):
    short = tokenize_batch(["rca1"], 16)
    longer_batch = tokenize_batch(["rca1", "rca1 gsb2 btc3"], 16)
    a = E.as_array(encode_text(params, short))[0]
    b = E.as_array(encode_text(params, longer_batch))[0]
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_changing_a_token_changes_the_embedding(params):
    ids = tokenize_batch(["rca1", "gca1"], 16)
    out = E.as_array(encode_text(params, ids))
    assert np.linalg.norm(out[0] - out[1]) > 1e-6


def test_image_contract_errors(params, corpus):
    seq = patchify(corpus.images[:2], 8)
    with pytest.raises(ShapeError):
        encode_image(params, PatchSequence(seq.tokens, seq.kept_indices[:, :3], seq.grid, 8))
    with pytest.raises(ShapeError):
        encode_text(params, np.full((1, 4), 300))


def test_project_zero_is_origin():
    p = project_to_hyperbolic(np.zeros((2, 5)), 1.0, 1.0)
    np.testing.assert_array_equal(p.time, [1.0, 1.0])
    assert np.all(p.space == 0)


def test_project_monotone_in_alpha():
    v = np.random.default_rng(0).normal(size=(20, 5))
    small = np.linalg.norm(project_to_hyperbolic(v, 0.5, 1.0).space, axis=-1)
    large = np.linalg.norm(project_to_hyperbolic(v, 1.0, 1.0).space, axis=-1)
    assert np.all(large > small)


def test_projected_points_are_on_manifold(params, corpus):
    v = encode_image(params, patchify(corpus.images, 8))
    p = project_to_hyperbolic(v, params["alpha_img"], params.curv)
    L.check_on_manifold(p, float(params.curv.data))


def test_positional_tables_are_frozen(params):
    frozen = {n for n, t in params.tensors.items() if t.frozen}
    assert frozen == {"image.pos", "text.pos"}
    assert "image.pos" not in dict(params.trainable())


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        p = init_params(EncoderConfig(embed_dim=32, heads=2), seed=1)
        save_checkpoint(tmp_path / "m.ckpt", p, {"note": "x"})
        q, meta = load_checkpoint(tmp_path / "m.ckpt")
        assert meta == {"note": "x"}
        assert q.checksum() == p.checksum()
        assert q.config == p.config

    def test_header_layout(self, tmp_path):
        p = init_params(EncoderConfig(embed_dim=32, heads=2), seed=1)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, p)
        raw = path.read_bytes()
        assert raw[:5] == b"HMID1"
        header = read_checkpoint_header(path)
        assert set(header["scalars"]) == {"tau", "curv", "alpha_img", "alpha_txt"}
        last = max(header["tensors"], key=lambda e: e["offset"])
        size = int.from_bytes(raw[5:9], "little")
        assert len(raw) == 9 + size + last["offset"] + last["nbytes"]

    def test_frozen_flag_survives(self, tmp_path):
        p = init_params(EncoderConfig(embed_dim=32, heads=2), seed=1).freeze()
        save_checkpoint(tmp_path / "t.ckpt", p)
        q, _ = load_checkpoint(tmp_path / "t.ckpt")
        assert q.frozen and q.trainable() == []

    def test_bad_magic(self, tmp_path):
        (tmp_path / "bad.ckpt").write_bytes(b"NOPE" + b"\0" * 20)
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "bad.ckpt")

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "absent.ckpt")
