pub mod enumerate;
pub mod gradcheck;
pub mod reference;
