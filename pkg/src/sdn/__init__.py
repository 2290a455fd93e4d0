"""Deep networks mapping discrete probability measures to measures or vectors."""
from .blocks import (Architecture, Dense, ElementaryBlock, InteractionMap, NoiseConcat, PairFunction, SelfTensorize,
                     apply_layer, elementary_block_apply, forward, make_gradient_flow_block, recurrent_iterate)
from .core import SeededRng, finite_diff_grad
from .measure import (DiscreteMeasure, GridSpec, dirac, discretize_p1, p1_basis_eval, push_forward, reconstruct,
                      self_tensorize, tensor_product, uniform_on)
from .transport import (SinkhornConfig, cost_matrix, exact_wasserstein, sinkhorn_cost, sinkhorn_divergence,
                        w1_between_laws)

__version__ = "0.1.0"
