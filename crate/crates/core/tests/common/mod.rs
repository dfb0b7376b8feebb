#![allow(dead_code)]
pub mod delayed;
pub mod e2e;
pub mod fig;
pub mod oracle;
pub mod stitch;
