"""Cross-attention vs concat-of-mean collaborator aggregation on case A.

Extra --set overrides are applied to both arms.
"""
import sys

from run_matrix import main

if __name__ == "__main__":
    extra = sys.argv[1:]
    for agg in ("cross_attention", "concat"):
        print(f"== aggregator {agg}")
        main(["--cases", "A", "--set", f"fusion.aggregator=\"{agg}\"", *extra])
