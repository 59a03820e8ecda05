import numpy as np
import pytest

from dfcnet import synth as S


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training experiments")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """12 land + 12 road synthetic 64x64 scenes."""
    root = tmp_path_factory.mktemp("corpus")
    S.synth_generate(S.SyntheticConfig(num_images=12, seed=3), root)
    return root


def naive_conv2d(x, w, b=None, stride=1, padding=0):
    """Direct cross-correlation loops; independent of im2col."""
    n, c, h, wd = x.shape
    k, _, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=np.float64)
    xp[:, :, padding:padding + h, padding:padding + wd] = x
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, k, oh, ow))
    for i in range(oh):
        for j in range(ow):
            win = xp[:, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
            out[:, :, i, j] = np.einsum("nchw,kchw->nk", win, w)
    if b is not None:
        out += np.asarray(b)[None, :, None, None]
    return out


def naive_bilinear(img, oh, ow):
    """Per-output-pixel evaluation of the half-pixel formula with clamping."""
    h, w = img.shape
    out = np.zeros((oh, ow))
    for i in range(oh):
        sy = min(max((i + 0.5) * h / oh - 0.5, 0.0), h - 1)
        y0 = int(np.floor(sy))
        y1 = min(y0 + 1, h - 1)
        fy = sy - y0
        for j in range(ow):
            sx = min(max((j + 0.5) * w / ow - 0.5, 0.0), w - 1)
            x0 = int(np.floor(sx))
            x1 = min(x0 + 1, w - 1)
            fx = sx - x0
            out[i, j] = ((1 - fy) * ((1 - fx) * img[y0, x0] + fx * img[y0, x1])
                         + fy * ((1 - fx) * img[y1, x0] + fx * img[y1, x1]))
    return out


@pytest.fixture(scope="session")
def overfit_run(tmp_path_factory):
    """500 iterations on one fixed 4+4 sample batch (shared by several tests)."""
    from dfcnet import experiments as E
    root = tmp_path_factory.mktemp("overfit")
    S.synth_generate(S.SyntheticConfig(num_images=4, seed=1), root)
    return E.overfit_single_batch(root, iterations=500, base_lr=0.01, seed=0)
