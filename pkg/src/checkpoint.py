"""
チェックポイント - モデルの保存と読み込み

形式: マジック b"BBCK" + ヘッダ長 (8バイト LE) + JSON ヘッダ + 層順の float32 LE ブロック
"""
import json
import struct
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
from loguru import logger

from src.models import LayerDef, Model
from src.tensor_core import DataFormatError

MAGIC = b"BBCK"
FORMAT_VERSION = 1
_LE_FLOAT32 = np.dtype("<f4")


def save_checkpoint(
    model: Model, path: Union[str, Path], seed: Optional[int] = None, epoch: Optional[int] = None
) -> Path:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "version": FORMAT_VERSION,
        "arch": model.arch,
        "input_shape": list(model.input_shape),
        "layers": [layer.to_dict() for layer in model.layers],
        "shapes": [
            {name: list(array.shape) for name, array in params.items()} for params in model.params
        ],
        "seed": seed,
        "epoch": epoch,
    }
    encoded = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(out, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(encoded)))
        f.write(encoded)
        for params in model.params:
            for name in sorted(params):
                f.write(np.ascontiguousarray(params[name], dtype=_LE_FLOAT32).tobytes())
    logger.debug(f"Saved checkpoint {out} ({model.parameter_count():,} parameters)")
    return out


def load_checkpoint(path: Union[str, Path]) -> Tuple[Model, dict]:
    """-> (モデル, ヘッダ)"""
    source = Path(path)
    if not source.is_file():
        raise FileNotFoundError(f"Checkpoint not found: {source}")
    blob = source.read_bytes()
    if blob[:4] != MAGIC:
        raise DataFormatError(f"{source} is not a checkpoint (bad magic)", 0)
    if len(blob) < 12:
        raise DataFormatError(f"Truncated checkpoint header in {source}", len(blob))
    (header_len,) = struct.unpack("<Q", blob[4:12])
    offset = 12 + header_len
    if len(blob) < offset:
        raise DataFormatError(f"Truncated checkpoint header in {source}", len(blob))
    header = json.loads(blob[12:offset].decode("utf-8"))
    if header.get("version") != FORMAT_VERSION:
        raise DataFormatError(f"Unsupported checkpoint version {header.get('version')}", 12)

    params = []
    for shapes in header["shapes"]:
        layer_params = {}
        for name in sorted(shapes):
            shape = tuple(shapes[name])
            count = int(np.prod(shape))
            end = offset + 4 * count
            if end > len(blob):
                raise DataFormatError(f"Truncated parameter block {name} in {source}", offset)
            layer_params[name] = (
                np.frombuffer(blob, dtype=_LE_FLOAT32, count=count, offset=offset)
                .astype(np.float32)
                .reshape(shape)
            )
            offset = end
        params.append(layer_params)
    if offset != len(blob):
        raise DataFormatError(f"Trailing bytes after parameters in {source}", offset)

    model = Model(
        arch=header["arch"],
        input_shape=tuple(header["input_shape"]),
        layers=[LayerDef.from_dict(d) for d in header["layers"]],
        params=params,
    )
    return model, header
