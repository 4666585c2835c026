import numpy as np
import pytest

from decorrelab.engine import seeded_rng


@pytest.fixture
def rng():
    return seeded_rng(20260809)


def conv2d_oracle(x, w, b, stride=1):
    """Six-nested-loop reference convolution (cross-correlation), float64."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    batch, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    ho = (h - kh) // stride + 1
    wo = (wd - kw) // stride + 1
    y = np.zeros((batch, cout, ho, wo))
    for bi in range(batch):
        for co in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(cin):
                        for di in range(kh):
                            for dj in range(kw):
                                acc += x[bi, ci, i * stride + di, j * stride + dj] * w[co, ci, di, dj]
                    y[bi, co, i, j] = acc + b[co]
    return y


def maxpool_oracle(x, window=2, stride=2):
    """Windowed-max reference, float64."""
    x = np.asarray(x, dtype=np.float64)
    batch, c, h, wd = x.shape
    ho = (h - window) // stride + 1
    wo = (wd - window) // stride + 1
    y = np.zeros((batch, c, ho, wo))
    for bi in range(batch):
        for ci in range(c):
            for i in range(ho):
                for j in range(wo):
                    y[bi, ci, i, j] = x[bi, ci, i * stride:i * stride + window,
                                        j * stride:j * stride + window].max()
    return y


def linear_oracle(x, w, b):
    """Dot-product reference, float64."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    batch, fin = x.shape
    fout = w.shape[0]
    y = np.zeros((batch, fout))
    for bi in range(batch):
        for fo in range(fout):
            acc = 0.0
            for fi in range(fin):
                acc += x[bi, fi] * w[fo, fi]
            y[bi, fo] = acc + b[fo]
    return y


def pearson_oracle(x, y):
    """Direct-formula sample PCC in float64."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xc = x - x.mean()
    yc = y - y.mean()
    return float((xc * yc).sum() / np.sqrt((xc * xc).sum() * (yc * yc).sum()))


def roc_auc_oracle(scores, labels):
    """O(N^2) pair counting; ties count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    total = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                total += 1.0
            elif p == q:
                total += 0.5
    return total / (len(pos) * len(neg))
