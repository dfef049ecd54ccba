import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from prepretrain import tensor as T
from prepretrain.data import default_vocabulary, generate_weak_dataset
from prepretrain.lit import (DEFAULT_TEMPLATES, AlignmentHeads, LitRecipe, TextConfig, TextEncoder, TextTokenizer,
                             class_embeddings, clip_loss, lit_train, load_templates, normalize_rows,
                             smoothed_targets, zero_shot_scores)
from prepretrain.rng import Stream
from prepretrain.train import params_checksum
from prepretrain.vit import ViTConfig, ViTEncoder
from prepretrain.wsp import build_weak_image_set

TINY = ViTConfig(2, 16, 32, 2, 4, 8, name="tiny")


def _unit(rng, b, d):
    return normalize_rows(rng.standard_normal((b, d)))


def _clip_oracle(img, txt, scale, eps):
    b = len(img)
    total = 0.0
    for direction in (0, 1):
        for i in range(b):
            row = [scale * sum(img[i][k] * txt[j][k] for k in range(img.shape[1])) if direction == 0 else
                   scale * sum(img[j][k] * txt[i][k] for k in range(img.shape[1])) for j in range(b)]
            m = max(row)
            lse = m + math.log(sum(math.exp(r - m) for r in row))
            for j in range(b):
                t = (1 - eps) * (i == j) + eps / b
                total += -t * (row[j] - lse) / b
    return total / 2


def test_clip_loss_single_pair_is_zero():
    rng = np.random.default_rng(0)
    with T.oracle_mode():
        for scale in (0.5, 14.0, 100.0):
            assert abs(clip_loss(_unit(rng, 1, 8), _unit(rng, 1, 8), scale, 0.0).data) < 1e-12


def test_clip_loss_perfect_alignment_limit():
    e = np.eye(4, 6)
    with T.oracle_mode():
        assert clip_loss(e, e, 1e4, 0.0).data < 1e-12
        assert clip_loss(e, e, 100.0, 0.0).data < 1e-40 + 1e-12


@given(st.integers(0, 2**31), st.sampled_from([0.0, 0.1, 0.3]))
def test_clip_loss_term_by_term_oracle(seed, eps):
    rng = np.random.default_rng(seed)
    img, txt = _unit(rng, 4, 5), _unit(rng, 4, 5)
    scale = float(rng.uniform(1, 30))
    with T.oracle_mode():
        got = clip_loss(img, txt, scale, eps).data
        assert abs(got - _clip_oracle(img, txt, scale, eps)) < 1e-6
        assert abs(got - clip_loss(txt, img, scale, eps).data) < 1e-12


def test_clip_loss_rejects_unnormalized():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        clip_loss(_unit(rng, 3, 4) * 1.01, _unit(rng, 3, 4), 10.0)


@given(st.integers(1, 64), st.floats(0.0, 1.0))
def test_smoothed_targets_rows_sum_to_one(b, eps):
    t = smoothed_targets(b, eps)
    assert np.allclose(t.sum(1), 1.0, atol=1e-12)


def test_logit_scale_init_and_clamp():
    heads = AlignmentHeads(16, 8, 4, stream=Stream(0))
    assert abs(float(heads.scale().data[0]) - 1 / 0.07) < 1e-3
    heads.params["logit_scale"].data[:] = 10.0
    assert float(heads.scale().data[0]) == 100.0


def test_tokenizer_round_trip_and_padding():
    tok = TextTokenizer.synthetic(context=8, extra=DEFAULT_TEMPLATES)
    ids = tok.encode("look at this red #circle")
    assert len(ids) == 8 and ids[0] == 2 and 3 in ids.tolist()
    assert tok.decode(ids) == "look at this red circle"
    long = tok.encode(" ".join(["red"] * 20))
    assert long[-1] == 3 and (long == 0).sum() == 0
    assert tok.decode(tok.encode("zzzunknown red")) == "<unk> red"


def test_text_encoder_ignores_padding():
    tok = TextTokenizer.synthetic(context=12)
    cfg = TextConfig(1, 16, 2, 32, 12, len(tok))
    enc = TextEncoder(cfg, stream=Stream(0))
    with T.oracle_mode():
        for p in enc.params.values():
            p.data = p.data.astype(np.float64)
        a = enc(tok.encode_batch(["a red circle"])).data
        # same sentence with a shorter context: only pad slots are dropped
        b = enc(tok.encode_batch(["a red circle"])[:, :6]).data
    assert np.allclose(a, b, atol=1e-9)


def _towers(seed=0):
    tok = TextTokenizer.synthetic(context=12, extra=DEFAULT_TEMPLATES)
    text = TextEncoder(TextConfig(1, 16, 2, 32, 12, len(tok)), stream=Stream(seed))
    heads = AlignmentHeads(TINY.embed, 16, 8, stream=Stream(seed))
    return tok, text, heads


def test_class_embeddings_examples():
    tok, text, heads = _towers()
    names = ["red circle", "blue square"]
    one = class_embeddings(names, ["a {}"], tok, text, heads)
    direct = normalize_rows(heads.text(text(tok.encode_batch(["a red circle", "a blue square"]))).data)
    assert np.allclose(one, direct, atol=1e-6)
    assert np.allclose(class_embeddings(names, ["a {}", "a {}"], tok, text, heads), one, atol=1e-6)
    three = ["a {}", "look at this {}", "my new {} painting"]
    got = class_embeddings(names, three, tok, text, heads)
    for c, name in enumerate(names):
        e = normalize_rows(heads.text(text(tok.encode_batch([t.replace("{}", name) for t in three]))).data)
        m = e.mean(0)
        assert np.allclose(got[c], m / np.linalg.norm(m), atol=1e-6)
    with pytest.raises(ValueError):
        class_embeddings(names, [], tok, text, heads)


def test_zero_shot_orthonormal_cases():
    classes = np.eye(5)
    for c in range(5):
        pred, scores = zero_shot_scores(classes[c:c + 1] * 3.7, classes)
        assert pred[0] == c and abs(scores[0, c] - 1.0) < 1e-12
    # exact tie between classes 1 and 3 goes to 1
    pred, _ = zero_shot_scores(np.array([[0, 1, 0, 1, 0.0]]), classes)
    assert pred[0] == 1


@given(st.integers(0, 2**31))
def test_zero_shot_brute_force_and_scale_invariance(seed):
    rng = np.random.default_rng(seed)
    cls = _unit(rng, 7, 6)
    img = rng.standard_normal((5, 6))
    pred, scores = zero_shot_scores(img, cls)
    for i in range(5):
        best, best_s = 0, -np.inf
        for c in range(7):
            s = sum(img[i, k] * cls[c, k] for k in range(6))
            if s > best_s:
                best, best_s = c, s
        assert pred[i] == best
    pred2, scores2 = zero_shot_scores(img * rng.uniform(0.1, 50), cls)
    assert np.array_equal(pred, pred2) and np.allclose(scores, scores2)


def test_load_templates(tmp_path):
    p = tmp_path / "t.txt"
    p.write_text("# comment\na {}\n\nmy {} painting\n")
    assert load_templates(p) == ["a {}", "my {} painting"]
    p.write_text("# nothing\n")
    with pytest.raises(ValueError):
        load_templates(p)


def _pairs(n=32):
    vocab = default_vocabulary()
    manifest = generate_weak_dataset(n, vocab, 0.0, 0.0, seed=3)
    ws = build_weak_image_set(manifest, vocab, image_size=8, dedup=False)
    return ws.images, ws.captions


def test_lit_freezes_image_tower_and_lr_zero():
    images, captions = _pairs()
    tok = TextTokenizer.synthetic(context=12)
    tcfg = TextConfig(1, 16, 2, 32, 12, len(tok))
    image = ViTEncoder(TINY, stream=Stream(1))
    before = params_checksum(image.params)
    res = lit_train(images, captions, image, tok, tcfg, LitRecipe(epochs=2.0, batch=8), Stream(0))
    assert res.image_checksum_before == res.image_checksum_after == before == params_checksum(image.params)
    fresh = TextEncoder(tcfg, stream=Stream(0))
    assert any(not np.array_equal(fresh.params[k].data, v.data) for k, v in res.text_encoder.params.items())
    assert not np.array_equal(res.heads.params["img.w"].data,
                              AlignmentHeads(TINY.embed, 16, 32, stream=Stream(0)).params["img.w"].data)
    zero = lit_train(images, captions, image, tok, tcfg, LitRecipe(epochs=2.0, batch=8, lr=0.0), Stream(0))
    assert all(np.array_equal(fresh.params[k].data, v.data) for k, v in zero.text_encoder.params.items())


def test_lit_errors():
    images, captions = _pairs(8)
    tok = TextTokenizer.synthetic(context=12)
    image = ViTEncoder(TINY, stream=Stream(1))
    with pytest.raises(ValueError):
        lit_train(images, captions[:3], image, tok, TextConfig(1, 16, 2, 32, 12, len(tok)), LitRecipe(), Stream(0))
    with pytest.raises(ValueError):
        lit_train(images, captions, image, tok, TextConfig(1, 16, 2, 32, 12, 5), LitRecipe(), Stream(0))
