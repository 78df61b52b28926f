/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_demo_free: (a: number, b: number) => void;
export const demo_city: (a: number) => [number, number];
export const demo_grid: (a: number, b: number, c: number) => [number, number, number, number];
export const demo_image_size: (a: number) => number;
export const demo_neighbors: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const demo_new: (a: bigint, b: number, c: number, d: number) => [number, number, number];
export const demo_thumbnail: (a: number, b: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_start: () => void;
