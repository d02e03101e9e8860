pub mod gbrt_reference;
