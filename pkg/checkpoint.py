"""
检查点格式

    header.json            format_version, kind, architecture, config_hash, parameters[], extra
    params/<name>.bin      每个参数一份小端二进制（float32 模型为 <f4）

读写都按参数名对应，保存再加载的数值逐位一致。
"""
import json
import os
from typing import Dict, Optional, Sequence

import numpy as np

from autodiff import Parameter
from errors import CheckpointMismatchError

FORMAT_VERSION = 1
HEADER_NAME = "header.json"
PARAM_DIR = "params"


def _blob_dtype(dtype) -> str:
    return "<f4" if np.dtype(dtype) == np.float32 else "<f8"


def save_checkpoint(directory: str, params: Sequence[Parameter], architecture: dict,
                    config_hash: str, kind: str, extra: Optional[dict] = None) -> str:
    """
    保存参数与结构配置

    Args:
        directory: 检查点目录（不存在时创建）
        params: 按固定顺序排列的参数
        architecture: 模型配置字典
        config_hash: 配置哈希，加载时校验
        kind: 模型种类，如 fgno / mae
        extra: 附加信息（归一化统计量等）

    Returns:
        header.json 的路径
    """
    os.makedirs(os.path.join(directory, PARAM_DIR), exist_ok=True)
    entries = []
    for p in params:
        dtype = _blob_dtype(p.dtype)
        rel = f"{PARAM_DIR}/{p.name}.bin"
        p.data.astype(dtype).tofile(os.path.join(directory, rel))
        entries.append({"name": p.name, "shape": list(p.shape), "dtype": dtype, "file": rel})
    header = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "architecture": architecture,
        "config_hash": config_hash,
        "parameters": entries,
        "extra": extra or {},
    }
    path = os.path.join(directory, HEADER_NAME)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(header, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def read_header(directory: str) -> dict:
    path = os.path.join(directory, HEADER_NAME)
    if not os.path.isfile(path):
        raise FileNotFoundError(f"no checkpoint header at {path}")
    with open(path, "r", encoding="utf-8") as f:
        header = json.load(f)
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointMismatchError(
            f"unsupported checkpoint format {header.get('format_version')} (expected {FORMAT_VERSION})")
    return header


def load_checkpoint(directory: str, params: Sequence[Parameter],
                    expected_hash: Optional[str] = None) -> dict:
    """把检查点中的数值写入 params；配置哈希不一致时拒绝加载"""
    header = read_header(directory)
    if expected_hash is not None and header["config_hash"] != expected_hash:
        raise CheckpointMismatchError(
            f"checkpoint config hash {header['config_hash']} does not match model hash {expected_hash}")
    entries: Dict[str, dict] = {e["name"]: e for e in header["parameters"]}
    for p in params:
        entry = entries.get(p.name)
        if entry is None:
            raise CheckpointMismatchError(f"parameter {p.name!r} missing from checkpoint")
        if tuple(entry["shape"]) != p.shape:
            raise CheckpointMismatchError(
                f"parameter {p.name!r}: checkpoint shape {tuple(entry['shape'])} vs model {p.shape}")
        raw = np.fromfile(os.path.join(directory, entry["file"]), dtype=entry["dtype"])
        p.data = raw.reshape(p.shape).astype(p.dtype)
        p.zero_grad()
    return header
