"""Self-attention vs uniform averaging when part of the index labels are shuffled."""

import numpy as np
from _common import config, finish, parser

from regnn.experiments import label_noise

if __name__ == "__main__":
    p = parser(__doc__)
    p.add_argument("--fraction", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=11, help="dataset and shuffle seed")
    args = p.parse_args()
    r = label_noise(config(args), args.fraction, args.seed)
    finish(args, r, [
        f"accuracy  base {r.base:.3f}  enhanced {r.enhanced_mean:.3f} ({np.round(r.enhanced, 3).tolist()})"
        f"  averaging {r.averaging:.3f}  1-NN {r.extra['retrieval']:.3f}",
        f"enhanced - averaging  {100 * (r.enhanced_mean - r.averaging):+.1f} points",
        f"base - 1-NN           {100 * (r.base - r.extra['retrieval']):+.1f} points",
    ])
