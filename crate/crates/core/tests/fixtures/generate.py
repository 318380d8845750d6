# Regenerates the reference JPEG fixtures with Pillow (libjpeg-turbo) and
# records the tables Pillow itself reports, as an independent dump.
import json

import numpy as np
from PIL import Image

rng = np.random.default_rng(1)
x = np.linspace(0, 1, 32)
base = np.stack(
    [np.outer(x, x) * 255, np.outer(1 - x, x) * 255, rng.uniform(0, 255, (32, 32))], -1
).astype(np.uint8)
img = Image.fromarray(base, "RGB")
meta = {}


def record(fn, qf):
    q = Image.open(fn).quantization
    meta[fn] = {"qf": qf, "tables": {str(k): list(v) for k, v in q.items()}}


for qf in [10, 25, 50, 75, 90, 100]:
    fn = f"pil_q{qf:03d}.jpg"
    img.save(fn, quality=qf, subsampling=0)
    record(fn, qf)
img.convert("L").save("pil_gray_q50.jpg", quality=50)
record("pil_gray_q50.jpg", 50)
img.save("pil_progressive_q75.jpg", quality=75, progressive=True)
record("pil_progressive_q75.jpg", 75)
img.save("pil_420_q30.jpg", quality=30)
record("pil_420_q30.jpg", 30)
json.dump(meta, open("pil_tables.json", "w"), indent=1)
