"""MAE per target bucket for base and retrieval-enhanced GIN on the long-tail regression set."""

import numpy as np
from _common import config, finish, parser

from regnn.experiments import longtail_regression

if __name__ == "__main__":
    p = parser(__doc__)
    p.add_argument("--size", type=int, default=3000)
    p.add_argument("--seed", type=int, default=1, help="dataset seed")
    args = p.parse_args()
    r = longtail_regression(config(args), args.size, args.seed)
    finish(args, r, [
        f"[30,inf) MAE  base {r.base:.3f}  enhanced {r.enhanced_mean:.3f} ({np.round(r.enhanced, 3).tolist()})"
        f"  averaging {r.averaging:.3f}  (n={r.extra['rare_count']})",
        f"overall MAE   base {r.extra['overall_base']:.3f}  enhanced {np.mean(r.extra['overall_enhanced']):.3f}",
    ])
