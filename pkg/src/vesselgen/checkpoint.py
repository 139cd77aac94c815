"""Checkpoints (parameter file + JSON sidecar) and CSV training logs."""
from __future__ import annotations

import csv
import json
import os
from typing import Sequence

import numpy as np

from vesselgen.autodiff import ParameterStore


def save_checkpoint(store: ParameterStore, cfg, path, epoch: int, kind: str) -> None:
    """Parameter file at ``path`` plus a JSON sidecar ``path + '.json'``."""
    store.save(path, meta={"kind": kind, "epoch": epoch})
    with open(str(path) + ".json", "w", encoding="utf-8") as fh:
        json.dump({"kind": kind, "epoch": epoch, "config": cfg.to_dict()}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path, config_cls):
    """Returns (store, config, epochs completed)."""
    store, meta = ParameterStore.load(path)
    with open(str(path) + ".json", encoding="utf-8") as fh:
        side = json.load(fh)
    return store, config_cls.from_dict(side["config"]), int(side.get("epoch", meta.get("epoch", 0)))


def checkpoint_kind(path) -> str:
    with open(str(path) + ".json", encoding="utf-8") as fh:
        return json.load(fh).get("kind", "")


def _fmt(x) -> str:
    return str(x) if isinstance(x, (int, np.integer)) else repr(float(x))


class CsvLog:
    """Appends one row per epoch; a resumed run keeps the existing rows."""

    def __init__(self, path, fields: Sequence[str], append: bool = False):
        self.fields = tuple(fields)
        exists = append and os.path.exists(path)
        self.fh = open(path, "a" if exists else "w", newline="", encoding="utf-8")
        self.writer = csv.writer(self.fh, lineterminator="\n")
        if not exists:
            self.writer.writerow(self.fields)

    def write(self, row: dict) -> None:
        self.writer.writerow([_fmt(row[k]) for k in self.fields])
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()


def read_log(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k == "epoch" else float(v)) for k, v in r.items()} for r in rows]
