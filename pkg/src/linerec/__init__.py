"""Text-line recognition engine: shared transformer image encoder with two
decoding architectures (alignment-lattice transducer and cross-attention
sequence-to-sequence), plus synthetic data generation, training, beam-search
decoding and character-error-rate evaluation."""

__version__ = "0.1.0"

from .tensor import Tensor, backward, no_grad

__all__ = ["Tensor", "backward", "no_grad", "__version__"]
