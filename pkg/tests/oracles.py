"""Independent reference implementations used only by the tests.

Everything here is deliberately written the slow, obvious way (explicit DFT
sums, pointwise triangle construction, scalar optimizer arithmetic, closed
form ridge regression) so that agreement with the package is evidence, not
tautology.
"""

import numpy as np


def hamming_window(n):
    k = np.arange(n)
    return 0.54 - 0.46 * np.cos(2.0 * np.pi * k / (n - 1))


def bruteforce_frames(samples, sample_rate, window_ms=20.0, hop_ms=10.0):
    win = int(round(window_ms * sample_rate / 1000.0))
    hop = int(round(hop_ms * sample_rate / 1000.0))
    t = (len(samples) - win) // hop + 1
    w = hamming_window(win)
    return np.array([samples[i * hop : i * hop + win] * w for i in range(t)])


def bruteforce_power_spectrum(frame, nfft):
    """|DFT|^2 by the definition, one bin at a time."""
    n = np.arange(nfft)
    padded = np.zeros(nfft)
    padded[: len(frame)] = frame
    bins = nfft // 2 + 1
    power = np.zeros(bins)
    for k in range(bins):
        re = np.sum(padded * np.cos(-2.0 * np.pi * k * n / nfft))
        im = np.sum(padded * np.sin(-2.0 * np.pi * k * n / nfft))
        power[k] = re * re + im * im
    return power


def bruteforce_mel_filters(n_mels, nfft, sample_rate):
    def to_mel(f):
        return 2595.0 * np.log10(1.0 + f / 700.0)

    def to_hz(m):
        return 700.0 * (10.0 ** (m / 2595.0) - 1.0)

    edges = [to_hz(m) for m in np.linspace(0.0, to_mel(sample_rate / 2.0), n_mels + 2)]
    bins = nfft // 2 + 1
    fb = np.zeros((n_mels, bins))
    for m in range(n_mels):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        for k in range(bins):
            f = k * sample_rate / nfft
            if lo <= f <= mid:
                fb[m, k] = (f - lo) / (mid - lo)
            elif mid < f <= hi:
                fb[m, k] = (hi - f) / (hi - mid)
    return fb


def bruteforce_dct2_ortho(vec):
    """Orthonormal DCT-II as the explicit cosine sum."""
    m = len(vec)
    out = np.zeros(m)
    for k in range(m):
        scale = np.sqrt(1.0 / m) if k == 0 else np.sqrt(2.0 / m)
        out[k] = scale * np.sum(vec * np.cos(np.pi * k * (2.0 * np.arange(m) + 1) / (2.0 * m)))
    return out


def bruteforce_mel_energies(samples, sample_rate, n_mels=40, window_ms=20.0,
                            hop_ms=10.0, nfft=None):
    frames = bruteforce_frames(samples, sample_rate, window_ms, hop_ms)
    if nfft is None:
        nfft = 1
        while nfft < frames.shape[1]:
            nfft *= 2
    fb = bruteforce_mel_filters(n_mels, nfft, sample_rate)
    return np.array(
        [fb @ bruteforce_power_spectrum(frame, nfft) for frame in frames]
    )  # (T, n_mels)


def bruteforce_mfcc(samples, sample_rate, n_mfcc=20, n_mels=40, window_ms=20.0,
                    hop_ms=10.0, log_floor=1e-10, nfft=None):
    mel = bruteforce_mel_energies(samples, sample_rate, n_mels, window_ms, hop_ms, nfft)
    logmel = np.log(np.maximum(mel, log_floor))
    coeffs = np.array([bruteforce_dct2_ortho(row)[:n_mfcc] for row in logmel])
    return coeffs.T  # (n_mfcc, T)


def hand_adam_steps(g_seq, lr=1e-2, beta1=0.9, beta2=0.999, eps=1e-8, x0=0.0):
    """Scalar Adam trajectory computed step by step from the update equations."""
    x, m, v = float(x0), 0.0, 0.0
    xs = []
    for t, g in enumerate(g_seq, start=1):
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        x = x - lr * m_hat / (np.sqrt(v_hat) + eps)
        xs.append(x)
    return xs


def ridge_onevsrest_accuracy(x_train, y_train, x_test, y_test, n_classes, lam=1e-2):
    """Closed-form one-vs-rest ridge regression accuracy; no gradient code."""
    xt = np.hstack([x_train, np.ones((x_train.shape[0], 1))])
    xs = np.hstack([x_test, np.ones((x_test.shape[0], 1))])
    targets = -np.ones((xt.shape[0], n_classes))
    targets[np.arange(xt.shape[0]), y_train] = 1.0
    a = xt.T @ xt + lam * np.eye(xt.shape[1])
    w = np.linalg.solve(a, xt.T @ targets)
    pred = np.argmax(xs @ w, axis=1)
    return float((pred == y_test).mean())
