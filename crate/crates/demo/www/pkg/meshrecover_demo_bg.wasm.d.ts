/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_demo_free: (a: number, b: number) => void;
export const demo_complete: (a: number, b: number) => [number, number, number, number];
export const demo_depthRgba: (a: number) => [number, number];
export const demo_height: (a: number) => number;
export const demo_matchUv: (a: number, b: number) => [number, number, number, number];
export const demo_new: (a: number) => number;
export const demo_overlay: (a: number) => [number, number];
export const demo_render: (a: number, b: number) => void;
export const demo_uvRgba: (a: number) => [number, number];
export const demo_width: (a: number) => number;
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
