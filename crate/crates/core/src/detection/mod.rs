pub mod boxes;
pub mod anchors;
pub mod losses;
pub mod nms;
pub mod assign;
pub mod kmeans;
