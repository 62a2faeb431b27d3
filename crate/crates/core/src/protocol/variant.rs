use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::boxes::BoxLossMode;
use crate::error::Error;

/// How class scores are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierMode {
    /// Softmax over the classes plus background, cross-entropy trained.
    Softmax,
    /// Independent per-class sigmoid on point weights, focal trained.
    Sigmoid,
    /// Closed-form probit predictive under a Gaussian posterior.
    Probit,
    /// Monte Carlo predictive under a Gaussian posterior.
    MonteCarlo,
}

impl ClassifierMode {
    pub fn bayesian(self) -> bool {
        matches!(self, ClassifierMode::Probit | ClassifierMode::MonteCarlo)
    }
}

/// Base models are shared by every variant with the same family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PretrainFamily {
    pub softmax: bool,
    pub box_mode: BoxLossMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    MaskRcnnSoftmax,
    MaskSigmoid,
    MaskProbit,
    MaskMc,
    MaskSigUncert,
    MaskSigGauss,
    MaskSigRefine,
    IfsRcnn,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::MaskRcnnSoftmax,
        Variant::MaskSigmoid,
        Variant::MaskProbit,
        Variant::MaskMc,
        Variant::MaskSigUncert,
        Variant::MaskSigGauss,
        Variant::MaskSigRefine,
        Variant::IfsRcnn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::MaskRcnnSoftmax => "mask_rcnn_softmax",
            Variant::MaskSigmoid => "mask_sigmoid",
            Variant::MaskProbit => "mask_probit",
            Variant::MaskMc => "mask_mc",
            Variant::MaskSigUncert => "mask_sig_uncert",
            Variant::MaskSigGauss => "mask_sig_gauss",
            Variant::MaskSigRefine => "mask_sig_refine",
            Variant::IfsRcnn => "ifs_rcnn",
        }
    }

    pub fn classifier(self) -> ClassifierMode {
        match self {
            Variant::MaskRcnnSoftmax => ClassifierMode::Softmax,
            Variant::MaskProbit | Variant::IfsRcnn => ClassifierMode::Probit,
            Variant::MaskMc => ClassifierMode::MonteCarlo,
            _ => ClassifierMode::Sigmoid,
        }
    }

    pub fn box_mode(self) -> BoxLossMode {
        match self {
            Variant::MaskSigUncert | Variant::IfsRcnn => BoxLossMode::Uncertainty,
            Variant::MaskSigGauss => BoxLossMode::Gaussian,
            Variant::MaskSigRefine => BoxLossMode::Cascade,
            _ => BoxLossMode::Plain,
        }
    }

    pub fn pretrain_family(self) -> PretrainFamily {
        PretrainFamily {
            softmax: self.classifier() == ClassifierMode::Softmax,
            box_mode: self.box_mode(),
        }
    }

    pub fn parse_list(text: &str) -> Result<Vec<Variant>, Error> {
        if text.trim() == "all" {
            return Ok(Self::ALL.to_vec());
        }
        text.split(',').map(|s| s.trim().parse()).collect()
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry() {
        assert_eq!(Variant::IfsRcnn.classifier(), ClassifierMode::Probit);
        assert_eq!(Variant::IfsRcnn.box_mode(), BoxLossMode::Uncertainty);
        // the two contribution switches are the only difference
        assert_eq!(Variant::MaskSigmoid.classifier(), ClassifierMode::Sigmoid);
        assert_eq!(Variant::MaskSigmoid.box_mode(), BoxLossMode::Plain);
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
            assert_eq!(serde_json::to_string(&v).unwrap(), format!("\"{}\"", v.name()));
        }
        assert!(matches!("nope".parse::<Variant>(), Err(Error::UnknownVariant(_))));
        assert_eq!(Variant::parse_list("mask_sigmoid, ifs_rcnn").unwrap().len(), 2);
        assert_eq!(Variant::parse_list("all").unwrap().len(), 8);
    }
}
