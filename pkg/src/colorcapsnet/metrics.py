# metrics.py
"""
 Copyright 2025 Google LLC

 Licensed under the Apache License, Version 2.0 (the "License");
 you may not use this file except in compliance with the License.
 You may obtain a copy of the License at

      https://www.apache.org/licenses/LICENSE-2.0

 Unless required by applicable law or agreed to in writing, software
 distributed under the License is distributed on an "AS IS" BASIS,
 WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 See the License for the specific language governing permissions and
 limitations under the License.
 """

import dataclasses
import math

import numpy as np
from scipy.signal import correlate2d

from colorcapsnet.errors import ShapeError

PEAK = 255.0
WINDOW_SIZE = 11
WINDOW_SIGMA = 1.5
C1 = (0.01 * PEAK) ** 2
C2 = (0.03 * PEAK) ** 2


@dataclasses.dataclass(frozen=True)
class QualityReport:
    psnr: float          # math.inf for identical images
    ssim: float
    ssim_global: float | None = None


def _as_channels(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    return image[None] if image.ndim == 2 else image


def _check_pair(ref: np.ndarray, est: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ref, est = _as_channels(ref), _as_channels(est)
    if ref.shape != est.shape:
        raise ShapeError(f"reference {ref.shape} and estimate {est.shape} differ in size")
    return ref, est


def psnr(ref: np.ndarray, est: np.ndarray) -> float:
    """10*log10(255^2 / MSE) over every pixel and channel; math.inf when MSE is 0."""
    ref, est = _check_pair(ref, est)
    mse = float(np.mean((ref - est) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(PEAK ** 2 / mse)


def gaussian_window(size: int = WINDOW_SIZE, sigma: float = WINDOW_SIGMA) -> np.ndarray:
    offsets = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(offsets ** 2) / (2.0 * sigma ** 2))
    window = np.outer(g, g)
    return window / window.sum()


def _ssim_channel(x: np.ndarray, y: np.ndarray, window: np.ndarray) -> float:
    def filt(v):
        return correlate2d(v, window, mode="valid")

    mu_x, mu_y = filt(x), filt(y)
    var_x = filt(x * x) - mu_x ** 2
    var_y = filt(y * y) - mu_y ** 2
    cov = filt(x * y) - mu_x * mu_y
    ssim_map = ((2.0 * mu_x * mu_y + C1) * (2.0 * cov + C2)) / \
               ((mu_x ** 2 + mu_y ** 2 + C1) * (var_x + var_y + C2))
    return float(ssim_map.mean())


def ssim(ref: np.ndarray, est: np.ndarray) -> float:
    """Mean SSIM over 11x11 Gaussian (sigma 1.5) windows, per channel then averaged.

    Images are [C, H, W] or [H, W] in 8-bit units; both sides must be at
    least one window wide.
    """
    ref, est = _check_pair(ref, est)
    if min(ref.shape[1:]) < WINDOW_SIZE:
        raise ShapeError(f"SSIM needs images of at least {WINDOW_SIZE}x{WINDOW_SIZE}, got {ref.shape[1:]}")
    window = gaussian_window()
    return float(np.mean([_ssim_channel(r, e, window) for r, e in zip(ref, est)]))


def ssim_global(ref: np.ndarray, est: np.ndarray) -> float:
    """Single-window SSIM with whole-image statistics, per channel then averaged."""
    ref, est = _check_pair(ref, est)
    scores = []
    for x, y in zip(ref, est):
        mu_x, mu_y = x.mean(), y.mean()
        cov = np.mean((x - mu_x) * (y - mu_y))
        scores.append(((2 * mu_x * mu_y + C1) * (2 * cov + C2))
                      / ((mu_x ** 2 + mu_y ** 2 + C1) * (x.var() + y.var() + C2)))
    return float(np.mean(scores))


def quality_report(ref: np.ndarray, est: np.ndarray, include_global: bool = False) -> QualityReport:
    return QualityReport(psnr(ref, est), ssim(ref, est),
                         ssim_global(ref, est) if include_global else None)
