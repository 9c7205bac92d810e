"""Measure the derived constants for a config and pin them with a digest.

Wraps ``fracouple calibrate`` and then writes a copy of the config whose
``constants`` entry points at the new file together with its SHA-256, so that
later runs refuse a modified constants file.

    python3 scripts/calibrate_constants.py [--config CFG] [--out DIR]
"""
import argparse
import json
import sys
from pathlib import Path

import yaml

from fracouple import cli


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(cli.default_config_path()))
    ap.add_argument("--out", type=Path, default=Path("calibration"))
    args = ap.parse_args(argv)
    args.out.mkdir(parents=True, exist_ok=True)
    const = args.out / "constants.json"
    rc = cli.main(["calibrate", "--config", args.config, "--out", str(const)])
    if rc:
        return rc
    raw = yaml.safe_load(Path(args.config).read_text())
    c = json.loads(const.read_text())
    if float(raw["c3"]) < c["c3_floor"]:
        print(f"note: c3 = {raw['c3']} is below the measured floor {c['c3_floor']:.4g}; raising it", file=sys.stderr)
        raw["c3"] = float(c["c3_floor"])
    raw["constants"] = {"path": const.name, "digest": cli.sha256_file(const)}
    pinned = args.out / "config.yaml"
    pinned.write_text(yaml.safe_dump(raw, sort_keys=False))
    print(f"pinned config written to {pinned}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
