pub mod primitive_suite;
