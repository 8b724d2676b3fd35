use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::nn::{conv_output_size, deconv_output_size};

/// Kernel size and padding of every encoder/decoder layer.
pub const KERNEL: usize = 3;
pub const PAD: usize = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Stage {
    pub layers: usize,
    pub width: usize,
    /// The first layer of the stage uses stride 2.
    pub downsample: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Autoencoder,
    Classifier { classes: usize },
    None,
}

impl fmt::Display for Head {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Head::Autoencoder => write!(f, "autoencoder"),
            Head::Classifier { classes } => write!(f, "classifier:{classes}"),
            Head::None => write!(f, "none"),
        }
    }
}

impl std::str::FromStr for Head {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "autoencoder" => Ok(Head::Autoencoder),
            "none" => Ok(Head::None),
            _ => {
                let classes = s
                    .strip_prefix("classifier:")
                    .and_then(|k| k.parse::<usize>().ok())
                    .filter(|&k| k > 0)
                    .ok_or_else(|| Error::config("head", format!("unknown head `{s}`")))?;
                Ok(Head::Classifier { classes })
            }
        }
    }
}

/// Declarative description of the symmetric auto-encoder or its classifier
/// variant.
///
/// Internal shortcuts start at every encoder junction `j` with
/// `j % shortcut_spacing == 0` and `0 < j < depth`, where junction `j` is
/// the output of encoder layer `j`. A spacing of 0 disables them. With an
/// odd depth the layer next to the bottleneck is left without a shortcut.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkSpec {
    pub stages: Vec<Stage>,
    pub shortcut_spacing: usize,
    pub input_output_shortcut: bool,
    /// `(C, H, W)` of the network input.
    pub input_shape: [usize; 3],
    pub head: Head,
}

/// Geometry of encoder layer `index` (1-based). Its mirror in the decoder
/// maps `out_shape` back to `in_shape`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerGeom {
    pub index: usize,
    pub in_shape: [usize; 3],
    pub out_shape: [usize; 3],
    pub stride: usize,
}

impl NetworkSpec {
    /// One width for every stage; the first non-empty stage keeps full
    /// resolution and every later non-empty stage starts with a stride-2
    /// layer. Shortcuts every 2 layers plus the input→output shortcut.
    pub fn from_layer_counts(counts: &[usize], width: usize, input_shape: [usize; 3], head: Head) -> Self {
        let first = counts.iter().position(|&m| m > 0);
        let stages = counts
            .iter()
            .enumerate()
            .map(|(i, &layers)| Stage {
                layers,
                width,
                downsample: layers > 0 && Some(i) != first,
            })
            .collect();
        NetworkSpec {
            stages,
            shortcut_spacing: 2,
            input_output_shortcut: true,
            input_shape,
            head,
        }
    }

    /// The 15-layer CIFAR configuration: stages of 5, 5, 5 and 0 layers,
    /// width 128, on 29×29 crops.
    pub fn cifar_15_layer() -> Self {
        Self::from_layer_counts(&[5, 5, 5, 0], 128, [3, 29, 29], Head::Autoencoder)
    }

    pub fn with_head(mut self, head: Head) -> Self {
        self.head = head;
        self
    }

    pub fn depth(&self) -> usize {
        self.stages.iter().map(|s| s.layers).sum()
    }

    /// Junctions receiving an internal shortcut, ascending.
    pub fn shortcut_junctions(&self) -> Vec<usize> {
        if self.shortcut_spacing == 0 {
            return Vec::new();
        }
        (1..self.depth())
            .filter(|j| j % self.shortcut_spacing == 0)
            .collect()
    }

    /// Encoder layer geometry, validating everything the head needs.
    pub fn layer_plan(&self) -> Result<Vec<LayerGeom>> {
        let depth = self.depth();
        if depth == 0 {
            return Err(Error::Geometry("network has no layers".into()));
        }
        if self.input_shape.contains(&0) {
            return Err(Error::Geometry(format!("input shape {:?}", self.input_shape)));
        }
        if let Head::Classifier { classes: 0 } = self.head {
            return Err(Error::Geometry("classifier needs at least one class".into()));
        }
        let mut plan = Vec::with_capacity(depth);
        let mut shape = self.input_shape;
        for stage in &self.stages {
            if stage.layers > 0 && stage.width == 0 {
                return Err(Error::Geometry("stage width must be positive".into()));
            }
            for l in 0..stage.layers {
                let stride = if l == 0 && stage.downsample { 2 } else { 1 };
                let h = conv_output_size(shape[1], KERNEL, stride, PAD)?;
                let w = conv_output_size(shape[2], KERNEL, stride, PAD)?;
                let out = [stage.width, h, w];
                if self.head == Head::Autoencoder {
                    let back_h = deconv_output_size(h, KERNEL, stride, PAD)?;
                    let back_w = deconv_output_size(w, KERNEL, stride, PAD)?;
                    if back_h != shape[1] || back_w != shape[2] {
                        return Err(Error::Geometry(format!(
                            "layer {} maps {}x{} to {h}x{w}, which the decoder cannot invert \
                             (stride-2 layers need odd input sizes)",
                            plan.len() + 1,
                            shape[1],
                            shape[2]
                        )));
                    }
                }
                plan.push(LayerGeom {
                    index: plan.len() + 1,
                    in_shape: shape,
                    out_shape: out,
                    stride,
                });
                shape = out;
            }
        }
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        self.layer_plan().map(|_| ())
    }

    /// Canonical `key=value` form: sorted keys, LF line endings.
    pub fn to_canonical_text(&self) -> String {
        let join = |f: &dyn Fn(&Stage) -> String| {
            self.stages.iter().map(f).collect::<Vec<_>>().join(",")
        };
        let mut map = BTreeMap::new();
        map.insert("downsample", join(&|s| u8::from(s.downsample).to_string()));
        map.insert("head", self.head.to_string());
        map.insert(
            "input",
            self.input_shape.map(|d| d.to_string()).join(","),
        );
        map.insert(
            "input_output_shortcut",
            u8::from(self.input_output_shortcut).to_string(),
        );
        map.insert("layers", join(&|s| s.layers.to_string()));
        map.insert("shortcut_spacing", self.shortcut_spacing.to_string());
        map.insert("widths", join(&|s| s.width.to_string()));
        map.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn from_canonical_text(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(line, "expected key=value"))?;
            if map.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
                return Err(Error::config(k, "duplicate key"));
            }
        }
        let mut take = |key: &str| {
            map.remove(key)
                .ok_or_else(|| Error::config(key, "missing from network spec"))
        };
        let layers = parse_list(&take("layers")?, "layers")?;
        let widths = parse_list(&take("widths")?, "widths")?;
        let downsample = parse_list(&take("downsample")?, "downsample")?;
        if widths.len() != layers.len() || downsample.len() != layers.len() {
            return Err(Error::config("layers", "layers, widths and downsample differ in length"));
        }
        let input = parse_list(&take("input")?, "input")?;
        let input_shape: [usize; 3] = input
            .try_into()
            .map_err(|_| Error::config("input", "expected C,H,W"))?;
        let spec = NetworkSpec {
            stages: layers
                .iter()
                .zip(&widths)
                .zip(&downsample)
                .map(|((&layers, &width), &d)| Stage {
                    layers,
                    width,
                    downsample: d != 0,
                })
                .collect(),
            shortcut_spacing: parse_usize(&take("shortcut_spacing")?, "shortcut_spacing")?,
            input_output_shortcut: parse_usize(&take("input_output_shortcut")?, "input_output_shortcut")? != 0,
            input_shape,
            head: take("head")?.parse()?,
        };
        if let Some(extra) = map.keys().next() {
            return Err(Error::config(extra.as_str(), "unknown network spec key"));
        }
        Ok(spec)
    }
}

fn parse_usize(s: &str, key: &str) -> Result<usize> {
    s.trim()
        .parse()
        .map_err(|_| Error::config(key, format!("expected a non-negative integer, got `{s}`")))
}

pub(crate) fn parse_list(s: &str, key: &str) -> Result<Vec<usize>> {
    s.split(',').map(|p| parse_usize(p, key)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cifar_15_layer_geometry() {
        let spec = NetworkSpec::cifar_15_layer();
        let plan = spec.layer_plan().unwrap();
        assert_eq!(plan.len(), 15);
        assert_eq!(plan[0].in_shape, [3, 29, 29]);
        assert_eq!(plan[5].stride, 2);
        assert_eq!(plan[5].out_shape, [128, 15, 15]);
        assert_eq!(plan[10].out_shape, [128, 8, 8]);
        assert_eq!(plan[14].out_shape, [128, 8, 8]);
        assert_eq!(spec.shortcut_junctions(), vec![2, 4, 6, 8, 10, 12, 14]);
    }

    #[test]
    fn even_size_before_stride_two_is_rejected() {
        let spec = NetworkSpec::from_layer_counts(&[1, 1], 4, [3, 8, 8], Head::Autoencoder);
        assert!(matches!(spec.validate(), Err(Error::Geometry(_))));
        // a classifier does not need to invert its geometry
        assert!(spec.with_head(Head::Classifier { classes: 10 }).validate().is_ok());
    }

    #[test]
    fn zero_layers_rejected() {
        let spec = NetworkSpec::from_layer_counts(&[0, 0], 4, [3, 9, 9], Head::Autoencoder);
        assert!(spec.validate().is_err());
    }

    #[test]
    fn canonical_text_is_sorted() {
        let text = NetworkSpec::cifar_15_layer().to_canonical_text();
        assert_eq!(
            text,
            "downsample=0,1,1,0\nhead=autoencoder\ninput=3,29,29\ninput_output_shortcut=1\n\
             layers=5,5,5,0\nshortcut_spacing=2\nwidths=128,128,128,128\n"
        );
    }

    #[test]
    fn canonical_text_rejects_unknown_key() {
        let mut text = NetworkSpec::cifar_15_layer().to_canonical_text();
        text.push_str("zzz=1\n");
        assert!(NetworkSpec::from_canonical_text(&text).is_err());
    }

    proptest! {
        #[test]
        fn canonical_text_round_trip(
            counts in proptest::collection::vec(0usize..4, 1..5),
            width in 1usize..64,
            spacing in 0usize..4,
            io in any::<bool>(),
            classes in 0usize..12,
        ) {
            let head = match classes {
                0 => Head::Autoencoder,
                1 => Head::None,
                k => Head::Classifier { classes: k },
            };
            let mut spec = NetworkSpec::from_layer_counts(&counts, width, [3, 17, 17], head);
            spec.shortcut_spacing = spacing;
            spec.input_output_shortcut = io;
            let back = NetworkSpec::from_canonical_text(&spec.to_canonical_text()).unwrap();
            prop_assert_eq!(back, spec);
        }
    }
}
