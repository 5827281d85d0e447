import csv
import json
import os
from typing import Iterable, Sequence

import numpy as np


class SimUtil:
    """
    Small helpers shared by the harness, the CLI and the toy problems: seed
    derivation, number formatting and file output.
    """

    @staticmethod
    def derive_seed(seed: int, *keys: int) -> int:
        """
        Independent 32-bit seed for a (seed, keys...) path, e.g. one per client.
        """
        state = np.random.SeedSequence([seed, *keys]).generate_state(1)
        return int(state[0])

    @staticmethod
    def format_float(value) -> str:
        """Shortest exact text for a float; empty for None."""
        if value is None:
            return ""
        return repr(float(value))

    @staticmethod
    def write_csv(path: str, header: Sequence[str], rows: Iterable[Sequence]):
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(header)
            for row in rows:
                writer.writerow(row)

    @staticmethod
    def ensure_dir(path: str):
        if path and not os.path.exists(path):
            os.makedirs(path)

    @staticmethod
    def write_debug(config, data, file_name):
        """Dump ``data`` as JSON into the debug directory when debug is on."""
        if not config.debug or config.debug_dir is None:
            return
        SimUtil.ensure_dir(config.debug_dir)
        debug_file_path = os.path.join(config.debug_dir, file_name)
        with open(debug_file_path, "w", encoding="utf-8") as file:
            json.dump(data, file, indent=2)
