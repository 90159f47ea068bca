//! Test-time fusion of two latent feature maps.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{kernels, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionStrategy {
    /// Element-wise sum of the two feature maps.
    Addition,
    /// Per-channel softmax weights from global average pooling.
    Channel,
}

impl FromStr for FusionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "addition" => Ok(Self::Addition),
            "channel" => Ok(Self::Channel),
            other => Err(Error::invalid(
                "fusion strategy",
                format!("unknown strategy `{other}` (expected addition or channel)"),
            )),
        }
    }
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Addition => "addition",
            Self::Channel => "channel",
        })
    }
}

/// Per-channel weights for the two sources; `ir + vi == 1` element-wise and
/// both lie strictly inside `(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelWeights<T: Scalar = f32> {
    /// `(n, c, 1, 1)`.
    pub ir: Tensor<T>,
    /// `(n, c, 1, 1)`.
    pub vi: Tensor<T>,
}

fn check_pair<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

pub fn fuse_addition<T: Scalar>(f_ir: &Tensor<T>, f_vi: &Tensor<T>) -> Result<Tensor<T>> {
    check_pair("fuse_addition", f_ir, f_vi)?;
    kernels::add(f_ir, f_vi)
}

/// Softmax over the two sources' channel means. Only the difference of the
/// means matters, and it is evaluated through the logistic function.
pub fn channel_weights<T: Scalar>(f_ir: &Tensor<T>, f_vi: &Tensor<T>) -> Result<ChannelWeights<T>> {
    check_pair("fuse_channel", f_ir, f_vi)?;
    let u_ir = kernels::global_avg_pool(f_ir);
    let u_vi = kernels::global_avg_pool(f_vi);
    let ir = kernels::softmax_first(&u_ir, &u_vi)?;
    let vi = ir.map(|p| T::one() - p);
    Ok(ChannelWeights { ir, vi })
}

pub fn fuse_channel<T: Scalar>(f_ir: &Tensor<T>, f_vi: &Tensor<T>) -> Result<Tensor<T>> {
    let w = channel_weights(f_ir, f_vi)?;
    let ir = kernels::scale_by_channel(f_ir, &w.ir)?;
    let vi = kernels::scale_by_channel(f_vi, &w.vi)?;
    kernels::add(&ir, &vi)
}

pub fn fuse<T: Scalar>(
    f_ir: &Tensor<T>,
    f_vi: &Tensor<T>,
    strategy: FusionStrategy,
) -> Result<Tensor<T>> {
    match strategy {
        FusionStrategy::Addition => fuse_addition(f_ir, f_vi),
        FusionStrategy::Channel => fuse_channel(f_ir, f_vi),
    }
}
