use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Width of the classifier's exposed feature layer.
pub const FEATURE_WIDTH: usize = 64;
pub const DEFAULT_LATENT_DIM: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Generator,
    Discriminator,
    Classifier,
}

impl Role {
    pub(crate) fn code(self) -> u8 {
        match self {
            Role::Generator => 0,
            Role::Discriminator => 1,
            Role::Classifier => 2,
        }
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Role::Generator),
            1 => Some(Role::Discriminator),
            2 => Some(Role::Classifier),
            _ => None,
        }
    }
}

/// Declarative description of one network. Capacity is set by the depth
/// scale `d`: every channel width is a multiple of it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub role: Role,
    pub image_size: usize,
    pub image_channels: usize,
    pub depth_scale: usize,
    #[serde(default = "default_latent")]
    pub latent_dim: usize,
    /// Classifier only; 0 otherwise.
    #[serde(default)]
    pub num_classes: usize,
}

fn default_latent() -> usize {
    DEFAULT_LATENT_DIM
}

impl NetworkSpec {
    pub fn generator(image_size: usize, image_channels: usize, depth_scale: usize) -> Self {
        NetworkSpec {
            role: Role::Generator,
            image_size,
            image_channels,
            depth_scale,
            latent_dim: DEFAULT_LATENT_DIM,
            num_classes: 0,
        }
    }

    pub fn discriminator(image_size: usize, image_channels: usize, depth_scale: usize) -> Self {
        NetworkSpec {
            role: Role::Discriminator,
            ..Self::generator(image_size, image_channels, depth_scale)
        }
    }

    pub fn classifier(
        image_size: usize,
        image_channels: usize,
        depth_scale: usize,
        num_classes: usize,
    ) -> Self {
        NetworkSpec {
            role: Role::Classifier,
            num_classes,
            ..Self::generator(image_size, image_channels, depth_scale)
        }
    }

    pub fn with_depth(self, depth_scale: usize) -> Self {
        NetworkSpec {
            depth_scale,
            ..self
        }
    }

    pub fn with_role(self, role: Role) -> Self {
        NetworkSpec { role, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if ![8, 16, 32, 64].contains(&self.image_size) {
            return Err(Error::Spec(format!(
                "image_size {} not in {{8, 16, 32, 64}}",
                self.image_size
            )));
        }
        if self.image_channels != 1 && self.image_channels != 3 {
            return Err(Error::Spec(format!(
                "image_channels must be 1 or 3, got {}",
                self.image_channels
            )));
        }
        if self.depth_scale == 0 {
            return Err(Error::Spec("depth scale d must be positive".into()));
        }
        if self.role == Role::Generator && self.latent_dim == 0 {
            return Err(Error::Spec("latent_dim must be positive".into()));
        }
        match (self.role, self.num_classes) {
            (Role::Classifier, n) if n < 2 => Err(Error::Spec(format!(
                "classifier needs at least 2 classes, got {n}"
            ))),
            (Role::Classifier, _) | (_, 0) => Ok(()),
            (_, n) => Err(Error::Spec(format!(
                "num_classes {n} given for a non-classifier"
            ))),
        }
    }

    /// Number of up/down-sampling blocks, `log2(image_size) - 2`.
    pub fn blocks(&self) -> usize {
        self.image_size.trailing_zeros() as usize - 2
    }

    /// Channel width at the 4x4 end of the network, `d * 2^(L-1)`.
    pub fn top_width(&self) -> usize {
        self.depth_scale << (self.blocks() - 1)
    }

    /// Shape of one generated/consumed image.
    pub fn image_shape(&self) -> [usize; 3] {
        [self.image_channels, self.image_size, self.image_size]
    }
}
