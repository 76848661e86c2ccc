pub use ctseg;
