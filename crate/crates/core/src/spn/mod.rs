//! Sum-product-network realizations of matrix multiplication and
//! convolution with ternary weights.

pub mod exact;
pub mod layer;
pub mod search;
pub mod ternary;

pub use exact::{
    make_canonical_strassen, make_naive_expansion, spn_matmul, spn_matmul_counted,
    verify_spn_exact, BilinearMap, OpCount, SpnTriple,
};
pub use layer::{
    paired_mixing, spn_conv2d, Lifecycle, OutputMixing, SpnConvLayer, StateRef, StateValue,
};
pub use search::{search_shared_value_spn, FilterBankTemplate, SearchConfig, SearchOutcome};
pub use ternary::{ternary_quantize, ternary_view, Quantized, QuantizerConfig, TernaryMatrix};
