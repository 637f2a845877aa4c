//! Complex-valued layers with explicit forward and backward passes.
//!
//! Every backward function takes the upstream gradient packaged as a
//! complex tensor whose components are the partial derivatives of the loss
//! with respect to the matching components of the layer output:
//! `G = dJ/d(re Y) + j dJ/d(im Y)`. No layer owns an autograd graph; the
//! network module wires caches and gradients together by hand.

mod act;
mod bn;
mod conv;
mod dropout;
mod pool;

pub use act::{cout_bwd, cout_fwd, crelu_bwd, crelu_fwd, sigmoid};
pub use bn::{cbn_bwd, cbn_fwd_infer, cbn_fwd_train, BnCache, BnParams};
pub use conv::{cconv2d_bwd, cconv2d_fwd, ConvParams};
pub use dropout::{dropout_apply, dropout_bwd, dropout_fwd, DropMask};
pub use pool::{
    cmaxpool_bwd, cmaxpool_fwd, cmaxunpool_bwd, cmaxunpool_fwd, top_left_locmap, LocMap,
};
