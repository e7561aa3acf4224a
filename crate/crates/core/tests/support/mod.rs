pub mod checks;
pub mod gradcheck;
