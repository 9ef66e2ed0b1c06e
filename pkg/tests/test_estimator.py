import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from nalsuper.estimator import NaLSuperEnhancer, check_image_pairs, check_images
from nalsuper.text import embed_prompts, write_embeddings
from nalsuper.training import make_synthetic


def stack(pairs):
    low = np.stack([p.low.transpose(1, 2, 0) for p in pairs])
    gt = np.stack([p.gt.transpose(1, 2, 0) for p in pairs])
    return low, gt


def quick(**kw):
    params = dict(channels=4, num_blocks=1, attention_dim=8, d_tau=8, steps=4)
    params.update(kw)
    return NaLSuperEnhancer(**params)


def test_check_images_forms():
    img = np.random.default_rng(0).uniform(0, 1, (5, 6, 3))
    assert check_images(img)[0].shape == (3, 5, 6)
    assert len(check_images(np.stack([img, img]))) == 2
    assert len(check_images([img, img[:4]])) == 2
    u8 = (img * 255).astype(np.uint8)
    np.testing.assert_allclose(check_images(u8)[0], u8.transpose(2, 0, 1) / 255.0)


@pytest.mark.parametrize(
    "bad, match",
    [
        (np.zeros((4, 4)), "shape"),
        (np.zeros((4, 4, 2)), r"\(H,W,3\)"),
        (np.full((4, 4, 3), 1.5), r"\[0, 1\]"),
        (np.full((4, 4, 3), np.nan), "non-finite"),
        (np.zeros((2, 4, 3)), "3x3"),
        ([], "no images"),
    ],
)
def test_check_images_rejects(bad, match):
    with pytest.raises(ValueError, match=match):
        check_images(bad)


def test_check_image_pairs_count_mismatch():
    img = np.zeros((4, 4, 3))
    with pytest.raises(ValueError, match="images"):
        check_image_pairs([img, img], [img])


def test_get_params_and_clone():
    est = quick(random_state=3)
    params = est.get_params()
    assert params["channels"] == 4 and params["random_state"] == 3
    twin = clone(est)
    assert twin.get_params() == params
    est.set_params(steps=9)
    assert est.steps == 9


def test_fit_transform_shapes_and_determinism():
    low, gt = stack(make_synthetic(2, 16, seed=1))
    a = quick().fit(low, gt)
    out = a.transform(low)
    assert out.shape == low.shape
    assert out.min() >= 0 and out.max() <= 1
    b = quick().fit(low, gt)
    np.testing.assert_array_equal(b.predict(low), out)
    assert a.loss_trace_.shape == (4,)
    assert np.isfinite(a.score(low, gt))


def test_transform_before_fit():
    with pytest.raises(NotFittedError):
        quick().transform(np.zeros((4, 4, 3)))


def test_embeddings_from_file(tmp_path):
    emb = embed_prompts(["bright", "dark", "dim"], 8, seed=2)
    write_embeddings(emb, tmp_path / "e.nlse")
    low, gt = stack(make_synthetic(1, 16))
    est = quick(embeddings=str(tmp_path / "e.nlse")).fit(low, gt)
    assert est.model_.embeddings.prompts == ["bright", "dark", "dim"]


def test_invalid_config_raises_on_fit():
    low, gt = stack(make_synthetic(1, 16))
    with pytest.raises(ValueError):
        quick(num_blocks=0).fit(low, gt)
