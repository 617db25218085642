//! Named architectures. A `_hebbian` suffix adds HFW modules to the base.

use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;

use super::{BackboneConfig, EmbedMode, FlatBackboneConfig, HierBackboneConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::hfw::HfwConfig;

pub const PRESETS: [&str; 6] = ["vit_s16", "deit_s16", "swin_tiny", "desk_vit", "desk_deit", "desk_swin"];

pub fn preset_names() -> Vec<alloc::string::String> {
    PRESETS
        .iter()
        .flat_map(|p| [p.to_string(), format!("{p}_hebbian")])
        .collect()
}

fn flat(depth: usize, dim: usize, heads: usize, patch: usize, mode: EmbedMode, target: usize) -> FlatBackboneConfig {
    FlatBackboneConfig {
        depth,
        dim,
        heads,
        mlp_ratio: 4,
        patch,
        in_channels: 3,
        image_size: FlatBackboneConfig::padded_extent(patch, target),
        hfw: None,
        embed_mode: mode,
    }
}

fn hier(depths: &[usize], dims: &[usize], heads: &[usize], window: usize, patch: usize, target: usize) -> HierBackboneConfig {
    HierBackboneConfig {
        stage_depths: depths.to_vec(),
        stage_dims: dims.to_vec(),
        stage_heads: heads.to_vec(),
        window,
        shift: true,
        patch,
        in_channels: 3,
        image_size: HierBackboneConfig::padded_extent(patch, window, depths.len(), target),
        mlp_ratio: 4,
        hfw: None,
    }
}

/// Builds a named architecture for square inputs of `target` pixels; the
/// image size is padded up to the nearest extent the architecture accepts.
pub fn preset(name: &str, target: usize) -> Result<ModelConfig> {
    let (base, hebbian) = match name.strip_suffix("_hebbian") {
        Some(b) => (b, true),
        None => (name, false),
    };
    let mut backbone = match base {
        "vit_s16" => BackboneConfig::Flat(flat(12, 384, 6, 16, EmbedMode::Gap, target)),
        // same architecture as ViT; the two differ only in training recipe
        "deit_s16" => BackboneConfig::Flat(flat(12, 384, 6, 16, EmbedMode::Gap, target)),
        "swin_tiny" => BackboneConfig::Hier(hier(&[2, 2, 6, 2], &[96, 192, 384, 768], &[3, 6, 12, 24], 6, 4, target)),
        "desk_vit" => BackboneConfig::Flat(flat(2, 64, 4, 8, EmbedMode::Gap, target)),
        "desk_deit" => BackboneConfig::Flat(flat(2, 64, 4, 8, EmbedMode::Gap, target)),
        "desk_swin" => BackboneConfig::Hier(hier(&[2, 2], &[32, 64], &[2, 4], 4, 2, target)),
        _ => {
            return Err(Error::Config(format!(
                "unknown model '{name}'; expected one of {}",
                preset_names().join(", ")
            )))
        }
    };
    if hebbian {
        match &mut backbone {
            BackboneConfig::Flat(f) => f.hfw = Some(HfwConfig::new(f.dim, f.heads)),
            BackboneConfig::Hier(h) => {
                let s = h.stage_dims.len() - 1;
                h.hfw = Some(HfwConfig::new(h.stage_dims[s], h.stage_heads[s]));
            }
        }
    }
    let cfg = ModelConfig {
        name: name.to_string(),
        backbone,
    };
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn count(c: &ModelConfig) -> usize {
        match &c.backbone {
            BackboneConfig::Flat(f) => f.param_count(),
            BackboneConfig::Hier(h) => h.param_count(),
        }
    }

    #[test]
    fn standard_sizes() {
        let vit = preset("vit_s16", 84).unwrap();
        assert_eq!(vit.image_size(), 96);
        assert!((count(&vit) as f64 / 21.7e6 - 1.0).abs() < 0.05);
        let swin = preset("swin_tiny", 84).unwrap();
        assert_eq!(swin.image_size(), 96);
        assert_eq!(count(&swin), 27_496_032);
        let deit = preset("deit_s16_hebbian", 84).unwrap();
        assert_eq!(count(&deit.without_hfw()), count(&vit));
        assert_eq!(count(&deit) - count(&deit.without_hfw()), 12 * (4 * 384 * 384 + 2 * 384 + 2));
    }

    #[test]
    fn desk_sizes() {
        let v = preset("desk_vit", 28).unwrap();
        assert_eq!(v.image_size(), 32);
        assert_eq!(count(&v), 113_472);
        assert_eq!(count(&preset("desk_vit_hebbian", 28).unwrap()), 113_472 + 33_028);
        let s = preset("desk_swin_hebbian", 28).unwrap();
        assert_eq!(s.image_size(), 32);
        assert_eq!(s.hfw().unwrap().heads, 4);
    }

    #[test]
    fn all_names_build() {
        for n in preset_names() {
            assert!(preset(&n, 28).is_ok(), "{n}");
        }
        assert!(preset("resnet", 28).is_err());
    }
}
