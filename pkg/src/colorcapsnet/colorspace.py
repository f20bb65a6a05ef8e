# colorspace.py
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

# sRGB (8-bit) <-> CIE Lab under D65 with the 2 degree observer.
# Pixel arrays carry color on the last axis; image helpers take [3, H, W].

import numpy as np
from numpy.typing import ArrayLike

# http://www.brucelindbloom.com/index.html?Eqn_RGB_XYZ_Matrix.html
SRGB_TO_XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])
XYZ_TO_SRGB = np.linalg.inv(SRGB_TO_XYZ)
D65_WHITE = np.array([0.95047, 1.0, 1.08883])

DELTA = 6.0 / 29.0
EPSILON = DELTA ** 3            # linear segment threshold on t
KAPPA = 24389.0 / 27.0          # 116 / (3 * DELTA^2), slope of L on the linear segment

L_RANGE = (0.0, 100.0)
AB_RANGE = (-128.0, 127.0)


def srgb_to_linear(c: np.ndarray) -> np.ndarray:
    """Inverse sRGB gamma for values in [0, 1]."""
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(c: np.ndarray) -> np.ndarray:
    c = np.clip(c, 0.0, 1.0)
    return np.where(c <= 0.0031308, 12.92 * c, 1.055 * c ** (1.0 / 2.4) - 0.055)


def _f(t: np.ndarray) -> np.ndarray:
    return np.where(t > EPSILON, np.cbrt(t), t / (3.0 * DELTA ** 2) + 4.0 / 29.0)


def _f_inv(t: np.ndarray) -> np.ndarray:
    return np.where(t > DELTA, t ** 3, 3.0 * DELTA ** 2 * (t - 4.0 / 29.0))


def rgb_to_lab(rgb: ArrayLike) -> np.ndarray:
    """Converts 8-bit sRGB pixels [..., 3] to Lab [..., 3] (float64).

    L lies in [0, 100]; a and b are clamped to [-128, 127].
    """
    c = np.asarray(rgb, dtype=np.float64) / 255.0
    xyz = srgb_to_linear(c) @ SRGB_TO_XYZ.T / D65_WHITE
    fx, fy, fz = _f(xyz[..., 0]), _f(xyz[..., 1]), _f(xyz[..., 2])
    y = xyz[..., 1]
    # same curve as 116 f(y) - 16, written so black maps to exactly 0
    lightness = np.where(y > EPSILON, 116.0 * np.cbrt(y) - 16.0, KAPPA * y)
    lab = np.stack([lightness, 500.0 * (fx - fy), 200.0 * (fy - fz)], axis=-1)
    return clamp_lab(lab)


def clamp_lab(lab: ArrayLike) -> np.ndarray:
    lab = np.asarray(lab, dtype=np.float64)
    return np.stack([np.clip(lab[..., 0], *L_RANGE),
                     np.clip(lab[..., 1], *AB_RANGE),
                     np.clip(lab[..., 2], *AB_RANGE)], axis=-1)


def lab_to_rgb(lab: ArrayLike) -> np.ndarray:
    """Converts Lab pixels [..., 3] to 8-bit sRGB, clamping out-of-gamut colors."""
    lab = np.asarray(lab, dtype=np.float64)
    lightness, a, b = lab[..., 0], lab[..., 1], lab[..., 2]
    fy = (lightness + 16.0) / 116.0
    fx = fy + a / 500.0
    fz = fy - b / 200.0
    y = np.where(lightness > KAPPA * EPSILON, fy ** 3, lightness / KAPPA)
    xyz = np.stack([_f_inv(fx), y, _f_inv(fz)], axis=-1) * D65_WHITE
    c = np.clip(linear_to_srgb(xyz @ XYZ_TO_SRGB.T), 0.0, 1.0)
    # round half up
    return np.floor(c * 255.0 + 0.5).astype(np.uint8)


def normalize_lab(lab: ArrayLike) -> np.ndarray:
    """Maps Lab onto [0, 1]^3: L/100, (a+128)/255, (b+128)/255."""
    lab = np.asarray(lab, dtype=np.float64)
    return np.stack([lab[..., 0] / 100.0, (lab[..., 1] + 128.0) / 255.0,
                     (lab[..., 2] + 128.0) / 255.0], axis=-1)


def denormalize_lab(values: ArrayLike) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    return np.stack([values[..., 0] * 100.0, values[..., 1] * 255.0 - 128.0,
                     values[..., 2] * 255.0 - 128.0], axis=-1)


def image_rgb_to_normalized_lab(image: np.ndarray) -> np.ndarray:
    """[3, H, W] 8-bit RGB -> [3, H, W] float32 normalized Lab."""
    lab = normalize_lab(rgb_to_lab(np.moveaxis(image, 0, -1)))
    return np.moveaxis(lab, -1, 0).astype(np.float32)


def image_normalized_lab_to_rgb(values: np.ndarray) -> np.ndarray:
    """[3, H, W] normalized Lab -> [3, H, W] 8-bit RGB."""
    rgb = lab_to_rgb(denormalize_lab(np.moveaxis(values, 0, -1)))
    return np.moveaxis(rgb, -1, 0)


def lightness_plane(image: np.ndarray) -> np.ndarray:
    """Grayscale plane of an RGB image [3, H, W]: the L channel scaled to [0, 1], shape [1, H, W]."""
    return image_rgb_to_normalized_lab(image)[:1]
