mod broadcast;
mod conv;
mod elementwise;
mod matmul;
mod norm;
mod reduce;
mod shape;
