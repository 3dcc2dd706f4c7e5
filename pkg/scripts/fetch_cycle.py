"""Fetch a public dynamometer schedule and convert it to a ``t,v`` cycle CSV.

The source may be a URL or a local file holding the EPA text layout
(two header lines, then seconds and mph per row).

Usage:
    python3 scripts/fetch_cycle.py SOURCE OUT.csv [--skip-rows 2]
"""

from __future__ import annotations

import argparse
import tempfile
import urllib.request
from pathlib import Path

from bevshift.cycles import convert_epa_schedule, load_cycle


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("source", help="URL or path of the schedule text file")
    parser.add_argument("out", type=Path, help="output CSV (t in s, v in m/s)")
    parser.add_argument("--skip-rows", type=int, default=2, help="header lines before the data")
    args = parser.parse_args(argv)

    if "://" in args.source:
        with tempfile.TemporaryDirectory() as tmp:
            local = Path(tmp) / "schedule.txt"
            with urllib.request.urlopen(args.source, timeout=60) as resp:
                local.write_bytes(resp.read())
            n = convert_epa_schedule(local, args.out, args.skip_rows)
    else:
        n = convert_epa_schedule(args.source, args.out, args.skip_rows)
    cycle = load_cycle(args.out)
    print(f"wrote {n} rows to {args.out}: {len(cycle)} s, {cycle.distance / 1000:.2f} km, "
          f"max {cycle.speeds.max():.1f} m/s")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
