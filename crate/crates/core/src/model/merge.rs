use super::{FfnMat, LoraPair, Model};
use crate::error::{Error, Result};
use crate::tensor::{Float, Mat};

fn check_pair<T: Float>(w: &Mat<T>, pair: &LoraPair<T>, what: &str) -> Result<()> {
    let (p, q) = w.shape();
    let r = pair.a.rows();
    if pair.a.shape() != (r, q) {
        return Err(Error::Shape {
            what: format!("{what} A"),
            expected: (r, q),
            got: pair.a.shape(),
        });
    }
    if pair.b.shape() != (p, r) {
        return Err(Error::Shape {
            what: format!("{what} B"),
            expected: (p, r),
            got: pair.b.shape(),
        });
    }
    Ok(())
}

/// `W + α·B·A` for the expert pair plus `α·B⁽ᶜ⁾A⁽ᶜ⁾` for the common pair.
pub fn lora_effective_weight<T: Float>(
    w: &Mat<T>,
    expert: Option<&LoraPair<T>>,
    common: Option<&LoraPair<T>>,
    alpha: f64,
) -> Result<Mat<T>> {
    let mut out = w.clone();
    let alpha = T::from_f64_lossy(alpha);
    for (pair, what) in [(expert, "expert"), (common, "common")] {
        if let Some(pair) = pair {
            check_pair(w, pair, what)?;
            let mut ba = pair.b.matmul(&pair.a);
            ba.scale(alpha);
            out.add_assign(&ba);
        }
    }
    Ok(out)
}

/// Single dense model for one domain: FFN matrices carry the folded-in
/// adapters, the prompt block travels alongside as a fixed prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct DeployedModel<T> {
    pub domain: usize,
    pub model: Model<T>,
}

impl<T: Float> DeployedModel<T> {
    pub fn logits(&self, tokens: &[u32]) -> Result<Mat<T>> {
        self.model.logits(self.domain, tokens)
    }
}

impl<T: Float> Model<T> {
    /// Folds the domain's expert (and the common adapter) into the backbone.
    pub fn merge_for_deployment(&self, domain: usize) -> Result<DeployedModel<T>> {
        self.check_domain(domain)?;
        let mut backbone = self.backbone.clone();
        if let Some(e) = &self.experts {
            for (l, blk) in backbone.layers.iter_mut().enumerate() {
                blk.w_in = e.effective_weight(&blk.w_in, domain, l, FfnMat::Wi)?;
                blk.w_out = e.effective_weight(&blk.w_out, domain, l, FfnMat::Wo)?;
            }
        }
        Ok(DeployedModel {
            domain,
            model: Model {
                config: self.config.clone(),
                backbone,
                prompts: self.prompts.clone(),
                experts: None,
                backbone_frozen: true,
            },
        })
    }
}
