pub mod count;
pub mod density;
pub mod grad;
pub mod sweep;
pub mod train;
