import json

import numpy as np
import pytest

from colorcapsnet.data_io import write_image


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def smooth_rgb():
    """Factory for smooth gradient RGB images [3, H, W] (uint8) that are easy to overfit."""
    def make(height: int, width: int) -> np.ndarray:
        yy, xx = np.mgrid[0:height, 0:width]
        r = 60 + 120 * xx / max(width - 1, 1)
        g = 80 + 100 * yy / max(height - 1, 1)
        b = 140 - 40 * (xx + yy) / max(height + width - 2, 1)
        return np.stack([r, g, b]).round().astype(np.uint8)
    return make


@pytest.fixture
def manifest_dir(tmp_path, smooth_rgb):
    """Factory writing color PPMs (and optional gray PGMs) plus a manifest.json."""
    def make(sizes, gray_sizes=None, n=9):
        records = []
        for i, (height, width) in enumerate(sizes):
            color = f"color_{i}.ppm"
            write_image(str(tmp_path / color), smooth_rgb(height, width))
            record = {"color": color, "gray": None}
            if gray_sizes and gray_sizes[i] is not None:
                gh, gw = gray_sizes[i]
                gray = f"gray_{i}.pgm"
                write_image(str(tmp_path / gray), np.full((1, gh, gw), 128, dtype=np.uint8))
                record["gray"] = gray
            records.append(record)
        path = tmp_path / "manifest.json"
        path.write_text(json.dumps({"records": records, "n": n, "seed": 42}))
        return str(path)
    return make
