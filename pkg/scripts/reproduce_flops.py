"""Print the FLOPs/token columns for both architecture presets."""

import argparse

from stratmoe.flops import REFERENCE, flops_table


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--arch", choices=["base", "big", "all"], default="all")
    args = ap.parse_args()
    for arch in (["base", "big"] if args.arch == "all" else [args.arch]):
        print(f"[{arch}]")
        for row in flops_table(arch, list(REFERENCE[arch])):
            ref = row["reference"] / 1e6
            print(f"  {row['variant']:<10} {row['computed'] / 1e6:8.1f}M  ref {ref:6.0f}M  {row['deviation_pct']:+6.2f}%")


if __name__ == "__main__":
    main()
