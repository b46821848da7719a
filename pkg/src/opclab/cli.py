"""``opc-lab <subcommand> --config PATH --out PATH [--seed N]``.

Exit codes: 0 on success, 2 when the config fails validation, 1 on a
runtime error. Failures print one JSON object on stderr.
"""

import argparse
import json
import sys

from opclab.config import SCHEMAS, load_config
from opclab.errors import ConfigError
from opclab.studies import run_study


def build_parser():
    p = argparse.ArgumentParser(prog="opc-lab", description="On-policy correction studies on analytic systems.")
    p.add_argument("subcommand", choices=sorted(SCHEMAS))
    p.add_argument("--config", required=True, help="INI config file")
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    return p


def _fail(kind, message, code, field=None):
    payload = {"error": kind, "message": message}
    if field is not None:
        payload["field"] = field
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.subcommand, args.seed)
    except ConfigError as exc:
        return _fail("config", str(exc), 2, exc.field)
    try:
        table = run_study(cfg)
        table.write(args.out)
    except ConfigError as exc:
        return _fail("config", f"{args.subcommand}: {exc}", 2, exc.field)
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        return _fail("runtime", f"{args.subcommand}: {type(exc).__name__}: {exc}", 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
