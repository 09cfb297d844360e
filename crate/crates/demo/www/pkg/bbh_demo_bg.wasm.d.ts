/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_toyrun_free: (a: number, b: number) => void;
export const kl_explorer: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
export const toyrun_histogram: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
export const toyrun_loss: (a: number) => number;
export const toyrun_new: (a: number, b: number, c: number, d: number) => [number, number, number];
export const toyrun_ratio: (a: number, b: number) => [number, number, number];
export const toyrun_svg: (a: number, b: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __wbindgen_start: () => void;
