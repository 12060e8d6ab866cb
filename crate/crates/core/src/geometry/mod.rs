//! Coarse template geometry: PCA shape space, skinning, UV coverage and splat assembly.

mod gaussians;
mod mesh;
mod pca;
mod skinning;

pub use gaussians::{
    assemble_gaussians, texel_rotation_field, write_gaussians, Gaussian, GaussianCloud, GAUSSIAN_COLUMNS,
};
pub use mesh::{
    barycentric_2d, build_texel_map, interpolate, texel_center, texel_frames, texel_rotations, TemplateMesh, TexelMap,
    TexelSample, MESH_MANIFEST,
};
pub use pca::{build_pca, flatten, pca_decode, pca_project, unflatten, PcaFit, PcaSubspace, PCA_MANIFEST};
pub use skinning::{
    dq_skin, transform_point, DualQuaternion, Joint, JointSpec, Skeleton, SkinInfluences, MAX_INFLUENCES,
};
